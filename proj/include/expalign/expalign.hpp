#pragma once

#include "expalign/commands.hpp"
#include "expalign/eah.hpp"
#include "expalign/fusion.hpp"
#include "expalign/geo_loss.hpp"
#include "expalign/gradients.hpp"
#include "expalign/io.hpp"
#include "expalign/mil.hpp"
#include "expalign/sem_loss.hpp"
#include "expalign/suites.hpp"
#include "expalign/synth.hpp"
#include "expalign/tensor.hpp"
#include "expalign/variational.hpp"
