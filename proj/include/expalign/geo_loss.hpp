#pragma once

// Geometry-aware consistency objective (GACO).
//
// The fine fused map is optionally scaled into (-1, 1), turned into a joint
// softmax over every (prompt, location) pair of one image, and into a
// sigmoid confidence R. Inside each prompt's mask R is standardized and
// clipped into an advantage A, and the loss is the advantage-weighted
// negative log-likelihood of the masked pairs averaged over all masked pairs
// of the batch. A is a constant with respect to differentiation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "expalign/numeric.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

enum class StdMode {
  /// sqrt(population variance + eps).
  population_eps_inside,
  /// unbiased sample standard deviation + eps (reference training code).
  sample_eps_outside,
};

struct GacoConfig {
  double clip = 3.0;
  double epsilon = 1e-6;
  bool normalize = true;
  StdMode std_mode = StdMode::population_eps_inside;
  double beta = 1.0;
  /// Mutation-testing hook: flips the sign of the accumulated loss value
  /// (not of the analytic gradient) so verification suites can be shown to
  /// detect it.
  bool inject_sign_fault = false;
};

/// Joint distribution over (prompt, location) pairs of one image.
struct PairDistribution {
  int prompts = 0;
  int height = 0;
  int width = 0;
  std::vector<double> probabilities;

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
  double at(int p, std::size_t i) const {
    return probabilities[static_cast<std::size_t>(p) * cells() + i];
  }
};

struct RegionStats {
  double mean = 0.0;
  double stddev = 0.0;
};

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// sim / (max|sim| + eps) over the whole map.
inline AlignmentMap normalize_sim(const AlignmentMap& m, double epsilon) {
  detail::require_domain(epsilon >= 0.0, "normalize_sim: epsilon must be >= 0");
  AlignmentMap out = m;
  const double denom = max_abs(m.values) + epsilon;
  if (denom == 0.0) return out;
  for (double& v : out.values) v /= denom;
  return out;
}

inline PairDistribution joint_softmax(const AlignmentMap& m) {
  PairDistribution d{m.prompts, m.height, m.width, softmax<double>(m.values)};
  return d;
}

inline AlignmentMap confidence(const AlignmentMap& m) {
  AlignmentMap out = m;
  for (double& v : out.values) v = sigmoid(v);
  return out;
}

/// Mean and spread of R over a region given as flat indices into `r`.
/// Returns nullopt for an empty region; the caller skips that prompt.
inline std::optional<RegionStats> region_stats(std::span<const double> r,
                                               std::span<const std::size_t> region,
                                               double epsilon,
                                               StdMode mode = StdMode::population_eps_inside) {
  if (region.empty()) return std::nullopt;
  const double n = static_cast<double>(region.size());
  double mean = 0.0;
  for (std::size_t i : region) mean += r[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i : region) ss += (r[i] - mean) * (r[i] - mean);
  RegionStats st;
  st.mean = mean;
  if (mode == StdMode::population_eps_inside) {
    st.stddev = std::sqrt(ss / n + epsilon);
  } else {
    const double sample_var = region.size() > 1 ? ss / (n - 1.0) : 0.0;
    st.stddev = std::sqrt(sample_var) + epsilon;
  }
  return st;
}

inline double advantage(double r, const RegionStats& st, double clip) {
  return std::clamp((r - st.mean) / st.stddev, -clip, clip);
}

/// Advantages of every masked location (zero elsewhere), per prompt region.
inline AlignmentMap advantages(const AlignmentMap& confidence_map, const InstanceMaskSet& masks,
                               const GacoConfig& cfg) {
  detail::require_dims(confidence_map.prompts == masks.prompts &&
                           confidence_map.height == masks.height &&
                           confidence_map.width == masks.width,
                       "advantages: mask shape does not match map shape");
  detail::require_domain(cfg.clip > 0.0 && std::isfinite(cfg.clip), "GACO: clip must be > 0");
  AlignmentMap a(confidence_map.prompts, confidence_map.height, confidence_map.width);
  for (int p = 0; p < masks.prompts; ++p) {
    const auto region = masks.region(p);
    const auto r = confidence_map.slice(p);
    const auto st = region_stats(r, region, cfg.epsilon, cfg.std_mode);
    if (!st) continue;
    auto out = a.slice(p);
    for (std::size_t i : region) out[i] = advantage(r[i], *st, cfg.clip);
  }
  return a;
}

/// One image's contribution to the batch loss.
struct GacoTerm {
  const PairDistribution* distribution = nullptr;
  const AlignmentMap* advantage = nullptr;
  const InstanceMaskSet* masks = nullptr;
};

/// -(1 / sum|M|) * sum_{b,p} sum_{i in M_bp} A(i) log P_b(p, i), or 0 when
/// the batch has no masked location.
inline double gaco_loss(std::span<const GacoTerm> batch, const GacoConfig& cfg = {}) {
  double acc = 0.0;
  std::size_t denom = 0;
  for (const auto& term : batch) {
    const auto& dist = *term.distribution;
    const auto& masks = *term.masks;
    detail::require_dims(dist.prompts == masks.prompts && dist.height == masks.height &&
                             dist.width == masks.width,
                         "gaco_loss: mask shape does not match distribution shape");
    for (int p = 0; p < masks.prompts; ++p) {
      const auto region = masks.region(p);
      const auto a = term.advantage->slice(p);
      for (std::size_t i : region) {
        const double prob = std::max(dist.at(p, i), 1e-300);
        acc -= a[i] * std::log(prob);
      }
      denom += region.size();
    }
  }
  if (denom == 0) return 0.0;
  const double loss = cfg.beta * acc / static_cast<double>(denom);
  return cfg.inject_sign_fault ? -loss : loss;
}

inline double gaco_loss(const PairDistribution& dist, const AlignmentMap& adv,
                        const InstanceMaskSet& masks, const GacoConfig& cfg = {}) {
  const GacoTerm term{&dist, &adv, &masks};
  return gaco_loss(std::span<const GacoTerm>(&term, 1), cfg);
}

/// Every intermediate of the objective for one image's fine fused map.
struct GacoEvaluation {
  AlignmentMap logits;  // after optional normalization
  PairDistribution distribution;
  AlignmentMap confidence;
  AlignmentMap advantage;
};

inline GacoEvaluation evaluate_gaco(const AlignmentMap& fused_up, const InstanceMaskSet& masks,
                                    const GacoConfig& cfg) {
  GacoEvaluation ev;
  ev.logits = cfg.normalize ? normalize_sim(fused_up, cfg.epsilon) : fused_up;
  ev.distribution = joint_softmax(ev.logits);
  ev.confidence = confidence(ev.logits);
  ev.advantage = advantages(ev.confidence, masks, cfg);
  return ev;
}

}  // namespace expalign
