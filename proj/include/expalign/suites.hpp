#pragma once

// Verification suites: every invariant the library promises, measured on
// seeded random instances and reported as a residual against a tolerance.
// Each property draws from its own stream, derived from the run seed and the
// property's name, so results do not depend on scheduling or on which other
// properties run.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "expalign/eah.hpp"
#include "expalign/fusion.hpp"
#include "expalign/geo_loss.hpp"
#include "expalign/gradients.hpp"
#include "expalign/mil.hpp"
#include "expalign/sem_loss.hpp"
#include "expalign/synth.hpp"
#include "expalign/variational.hpp"

namespace expalign {

struct SuiteOptions {
  std::uint64_t seed = 0;
  /// Hyperparameters of the gradient checks; its fault flag also reaches
  /// every consistency-loss property.
  ObjectiveConfig objective;
  int gradient_configs = 20;
};

struct Measurement {
  double residual = 0.0;
  std::size_t cases = 0;
};

struct PropertySpec {
  std::string suite;
  std::string name;
  double tolerance = 0.0;
  std::function<Measurement(Rng&, const SuiteOptions&)> run;
};

struct PropertyResult {
  std::string suite;
  std::string name;
  double residual = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  bool passed = false;
  std::string error;  // set when the property threw
};

/// splitmix64 finalizer applied to seed + FNV-1a(key).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed + h + 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace detail {

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline std::vector<double> gaussian(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline std::vector<double> uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Random tokens with at least one valid entry.
inline TokenBatch random_tokens(Rng& rng, int L, int C) {
  TokenBatch t(L, C);
  t.embeddings = gaussian(rng, t.embeddings.size());
  for (int l = 0; l < L; ++l) t.valid[l] = rng.uniform() < 0.8;
  t.valid[rng.integer(0, L - 1)] = true;
  return t;
}

inline FeatureMap random_features(Rng& rng, int C, int H, int W) {
  FeatureMap f(3, C, H, W);
  f.values = gaussian(rng, f.values.size());
  return f;
}

inline AlignmentMap random_map(Rng& rng, int P, int H, int W, double lo, double hi) {
  AlignmentMap m(P, H, W);
  m.values = uniform_vec(rng, m.values.size(), lo, hi);
  return m;
}

inline InstanceMaskSet random_masks(Rng& rng, int P, int H, int W, double density) {
  InstanceMaskSet m(P, H, W);
  for (auto& v : m.values) v = rng.uniform() < density;
  return m;
}

inline ScalePyramid random_pyramid(Rng& rng, int P, int h5, int w5) {
  return {random_map(rng, P, 4 * h5, 4 * w5, -2, 2), random_map(rng, P, 2 * h5, 2 * w5, -2, 2),
          random_map(rng, P, h5, w5, -2, 2)};
}

inline double valid_mean_gap(std::span<const double> means, const std::vector<bool>& valid,
                             std::size_t& best) {
  double first = -std::numeric_limits<double>::infinity(), second = first;
  for (std::size_t l = 0; l < means.size(); ++l) {
    if (!valid[l]) continue;
    if (means[l] > first) {
      second = first;
      first = means[l];
      best = l;
    } else if (means[l] > second) {
      second = means[l];
    }
  }
  return first - second;
}

inline GibbsProblem random_gibbs_problem(Rng& rng, std::size_t n) {
  GibbsProblem p;
  p.energy = uniform_vec(rng, n, -3, 3);
  p.geometry = uniform_vec(rng, n, -3, 3);
  for (double& a : p.geometry)
    if (rng.uniform() < 1.0 / 3.0) a = 0.0;
  p.temperature = rng.uniform(0.2, 2.2);
  p.geometry_weight = rng.uniform(0.0, 2.0);
  return p;
}

/// C = 1 and one unit token make every expectation map equal the features:
/// left half 0 and right half log 3 at every scale, all of it masked.
inline Sample split_scene() {
  Sample s;
  for (int sc = 0; sc < 3; ++sc) {
    FeatureMap fm(3 + sc, 1, 4 >> sc, 8 >> sc);
    for (int r = 0; r < fm.height; ++r)
      for (int c = fm.width / 2; c < fm.width; ++c) fm.at(0, r, c) = std::log(3.0);
    s.features[sc] = fm;
  }
  TokenBatch t(1, 1);
  t.at(0, 0) = 1.0;
  s.tokens = {t};
  s.masks = InstanceMaskSet(1, 4, 8);
  std::fill(s.masks.values.begin(), s.masks.values.end(), 1);
  s.labels = PromptLabels{1, {0}};
  return s;
}

inline constexpr double kWorkedGeo = -0.549306;
inline constexpr double kWorkedSemTwoPrompt = 0.313262;
inline constexpr double kWorkedSemEqualLogits = 1.098612;

// Expectation head.

inline std::vector<PropertySpec> eah_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"eah", "posterior_on_simplex", 1e-12, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
      const auto pi = token_posterior(token_similarity(f, tok), tok.valid, rng.uniform(0.1, 3.0));
      double total = 0.0;
      for (std::size_t l = 0; l < pi.weights.size(); ++l) {
        total += pi.weights[l];
        if (!tok.valid[l]) m.residual = std::max(m.residual, std::abs(pi.weights[l]));
        if (pi.weights[l] < 0.0) m.residual = std::max(m.residual, -pi.weights[l]);
      }
      m.residual = std::max(m.residual, std::abs(total - 1.0));
    }
    return m;
  }});
  out.push_back({"eah", "token_temperature_cold_limit", 1e-5, [](Rng& rng, const SuiteOptions&) {
    // tau_t -> 0 selects the valid token with the largest spatial mean.
    Measurement m;
    while (m.cases < 200) {
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
      const auto s = token_similarity(f, tok);
      std::size_t best = 0;
      if (valid_mean_gap(spatial_token_mean(s), tok.valid, best) < 1e-3) continue;
      const auto eam = expectation_map(s, token_posterior(s, tok.valid, 1e-6));
      for (std::size_t i = 0; i < s.cells(); ++i)
        m.residual = std::max(m.residual, std::abs(eam.values[i] - s.location(i)[best]));
      ++m.cases;
    }
    return m;
  }});
  out.push_back({"eah", "token_temperature_hot_limit", 1e-5, [](Rng& rng, const SuiteOptions&) {
    // tau_t -> infinity averages the valid tokens uniformly.
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
      const auto s = token_similarity(f, tok);
      const auto eam = expectation_map(s, token_posterior(s, tok.valid, 1e8));
      const double n_valid = static_cast<double>(std::count(tok.valid.begin(), tok.valid.end(), true));
      for (std::size_t i = 0; i < s.cells(); ++i) {
        double avg = 0.0;
        for (int l = 0; l < tok.count(); ++l)
          if (tok.valid[l]) avg += s.location(i)[l];
        m.residual = std::max(m.residual, std::abs(eam.values[i] - avg / n_valid));
      }
    }
    return m;
  }});
  out.push_back({"eah", "token_permutation_invariance", 1e-12, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
      std::vector<int> order(static_cast<std::size_t>(tok.count()));
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      TokenBatch perm(tok.count(), tok.channels);
      for (int l = 0; l < tok.count(); ++l) {
        perm.valid[l] = tok.valid[order[l]];
        for (int c = 0; c < tok.channels; ++c) perm.at(l, c) = tok.at(order[l], c);
      }
      const double tau = rng.uniform(0.1, 3.0);
      const auto a = expectation_maps(f, std::span<const TokenBatch>(&tok, 1), tau);
      const auto b = expectation_maps(f, std::span<const TokenBatch>(&perm, 1), tau);
      m.residual = std::max(m.residual, max_abs_diff(a.values, b.values));
    }
    return m;
  }});
  return out;
}

// Scale fusion.

inline std::vector<PropertySpec> fusion_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"fusion", "linearity", 1e-10, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const int P = rng.integer(1, 3), h5 = rng.integer(1, 4), w5 = rng.integer(1, 4);
      const auto x = random_pyramid(rng, P, h5, w5), y = random_pyramid(rng, P, h5, w5);
      const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);
      auto combine = [&](const AlignmentMap& u, const AlignmentMap& v) {
        AlignmentMap r = u;
        for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = a * u.values[i] + b * v.values[i];
        return r;
      };
      const ScalePyramid z{combine(x.p3, y.p3), combine(x.p4, y.p4), combine(x.p5, y.p5)};
      m.residual = std::max(m.residual, max_abs_diff(fuse_down(z).values,
                                                     combine(fuse_down(x), fuse_down(y)).values));
      m.residual = std::max(m.residual, max_abs_diff(fuse_up(z).values,
                                                     combine(fuse_up(x), fuse_up(y)).values));
    }
    return m;
  }});
  out.push_back({"fusion", "constant_preservation", 1e-12, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const int P = rng.integer(1, 3), h5 = rng.integer(1, 4), w5 = rng.integer(1, 4);
      const double c = rng.uniform(-2, 2);
      const ScalePyramid pyr{AlignmentMap(P, 4 * h5, 4 * w5, c), AlignmentMap(P, 2 * h5, 2 * w5, c),
                             AlignmentMap(P, h5, w5, c)};
      for (double v : fuse_down(pyr).values) m.residual = std::max(m.residual, std::abs(v - c));
      for (double v : fuse_up(pyr).values) m.residual = std::max(m.residual, std::abs(v - c));
    }
    return m;
  }});
  out.push_back({"fusion", "resampling_adjoints", 1e-10, [](Rng& rng, const SuiteOptions&) {
    // <Down x, y> = <x, Down^T y> and <Up y, x> = <y, Up^T x>.
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const int P = rng.integer(1, 3), h = rng.integer(1, 6), w = rng.integer(1, 6);
      const auto x = random_map(rng, P, 2 * h, 2 * w, -2, 2);
      const auto y = random_map(rng, P, h, w, -2, 2);
      auto dot = [](const AlignmentMap& u, const AlignmentMap& v) {
        return std::inner_product(u.values.begin(), u.values.end(), v.values.begin(), 0.0);
      };
      m.residual = std::max(m.residual, std::abs(dot(downsample2x(x), y) - dot(x, downsample2x_adjoint(y))));
      m.residual = std::max(m.residual, std::abs(dot(upsample2x(y), x) - dot(y, upsample2x_adjoint(x))));
    }
    return m;
  }});
  return out;
}

// Contrastive loss.

inline std::vector<PropertySpec> sem_loss_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"sem_loss", "single_prompt_zero", 0.0, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 50; ++t, ++m.cases) {
      const PooledLogits l{{rng.uniform(-50, 50)}, rng.uniform(0.01, 2.0)};
      m.residual = std::max(m.residual, std::abs(infonce_multi_positive(l, {1, {0}})));
      auto s = random_sample(rng, 1, 3, 3, 8, 8);
      m.residual = std::max(m.residual, std::abs(objective(s, ObjectiveConfig{}).sem));
    }
    return m;
  }});
  out.push_back({"sem_loss", "shift_invariance", 1e-10, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const int P = rng.integer(1, 6);
      PooledLogits l{uniform_vec(rng, static_cast<std::size_t>(P), -3, 3), rng.uniform(0.1, 1.0)};
      const PromptLabels lab{P, {rng.integer(0, P - 1)}};
      const double base = infonce_multi_positive(l, lab);
      const double k = rng.uniform(-30, 30);
      for (double& v : l.values) v += k;
      m.residual = std::max(m.residual, std::abs(infonce_multi_positive(l, lab) - base));
    }
    return m;
  }});
  out.push_back({"sem_loss", "temperature_absorption", 1e-10, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const int P = rng.integer(1, 6);
      PooledLogits l{uniform_vec(rng, static_cast<std::size_t>(P), -3, 3), rng.uniform(0.1, 1.0)};
      const PromptLabels lab{P, {rng.integer(0, P - 1)}};
      const double base = infonce_multi_positive(l, lab);
      const double a = rng.uniform(0.1, 3.0);
      for (double& v : l.values) v *= a;
      l.temperature *= a;
      m.residual = std::max(m.residual, std::abs(infonce_multi_positive(l, lab) - base));
    }
    return m;
  }});
  out.push_back({"sem_loss", "nonnegative", 0.0, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const int P = rng.integer(1, 6);
      const PooledLogits l{uniform_vec(rng, static_cast<std::size_t>(P), -5, 5), rng.uniform(0.05, 1.0)};
      const PromptLabels lab{P, {rng.integer(0, P - 1)}};
      m.residual = std::max(m.residual, -infonce_multi_positive(l, lab));
    }
    return m;
  }});
  out.push_back({"sem_loss", "worked_example_two_prompt", 1e-6, [](Rng&, const SuiteOptions&) {
    return Measurement{std::abs(infonce_multi_positive({{1.0, 0.0}, 1.0}, {2, {0}}) - kWorkedSemTwoPrompt), 1};
  }});
  out.push_back({"sem_loss", "worked_example_equal_logits", 1e-6, [](Rng&, const SuiteOptions&) {
    return Measurement{
        std::abs(infonce_multi_positive({{0.3, 0.3, 0.3}, 0.7}, {3, {0, 1}}) - kWorkedSemEqualLogits), 1};
  }});
  return out;
}

// Consistency loss. The fault flag of the options reaches every property
// that evaluates the loss value.

inline std::vector<PropertySpec> geo_loss_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"geo_loss", "worked_example", 1e-5, [](Rng&, const SuiteOptions& o) {
    GacoConfig cfg;
    cfg.normalize = false;
    cfg.epsilon = 1e-12;
    cfg.inject_sign_fault = o.objective.gaco.inject_sign_fault;
    InstanceMaskSet masks(1, 1, 2);
    masks.values = {1, 1};
    AlignmentMap s(1, 1, 2);
    s.values = {0.0, std::log(3.0)};
    const auto ev = evaluate_gaco(s, masks, cfg);
    return Measurement{std::abs(gaco_loss(ev.distribution, ev.advantage, masks, cfg) - kWorkedGeo), 1};
  }});
  out.push_back({"geo_loss", "worked_example_through_objective", 1e-5, [](Rng&, const SuiteOptions& o) {
    ObjectiveConfig cfg;
    cfg.lambda_sem = 0.0;
    cfg.gaco.normalize = false;
    cfg.gaco.epsilon = 1e-12;
    cfg.gaco.inject_sign_fault = o.objective.gaco.inject_sign_fault;
    return Measurement{std::abs(objective(split_scene(), cfg).total - kWorkedGeo), 1};
  }});
  out.push_back({"geo_loss", "zero_advantage_zero_loss", 0.0, [](Rng& rng, const SuiteOptions& o) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const int P = rng.integer(1, 4), H = rng.integer(1, 8), W = rng.integer(1, 8);
      const auto d = joint_softmax(random_map(rng, P, H, W, -5, 5));
      const auto masks = random_masks(rng, P, H, W, 0.5);
      m.residual = std::max(m.residual, std::abs(gaco_loss(d, AlignmentMap(P, H, W), masks, o.objective.gaco)));
    }
    return m;
  }});
  out.push_back({"geo_loss", "empty_masks_zero_loss", 0.0, [](Rng& rng, const SuiteOptions& o) {
    Measurement m;
    for (int t = 0; t < 50; ++t, ++m.cases) {
      auto s = random_sample(rng, rng.integer(1, 3), 3, 3, 8, 8);
      std::fill(s.masks.values.begin(), s.masks.values.end(), 0);
      ObjectiveConfig cfg;
      cfg.gaco.inject_sign_fault = o.objective.gaco.inject_sign_fault;
      m.residual = std::max(m.residual, std::abs(objective(s, cfg).geo));
    }
    return m;
  }});
  out.push_back({"geo_loss", "zero_mean_advantage", 1e-8, [](Rng& rng, const SuiteOptions&) {
    // No clipping and epsilon -> 0: standardized values sum to zero per region.
    GacoConfig cfg;
    cfg.clip = 1e9;
    cfg.epsilon = 1e-12;
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const int P = rng.integer(1, 4), H = rng.integer(2, 8), W = rng.integer(2, 8);
      const auto r = confidence(random_map(rng, P, H, W, -3, 3));
      const auto masks = random_masks(rng, P, H, W, 0.4);
      const auto a = advantages(r, masks, cfg);
      for (int p = 0; p < P; ++p) {
        double sum = 0.0;
        for (std::size_t i : masks.region(p)) sum += a.slice(p)[i];
        m.residual = std::max(m.residual, std::abs(sum));
      }
    }
    return m;
  }});
  out.push_back({"geo_loss", "joint_distribution_normalized", 1e-10, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const auto d = joint_softmax(random_map(rng, rng.integer(1, 4), rng.integer(1, 8), rng.integer(1, 8), -20, 20));
      const double total = std::accumulate(d.probabilities.begin(), d.probabilities.end(), 0.0);
      m.residual = std::max(m.residual, std::abs(total - 1.0));
    }
    return m;
  }});
  out.push_back({"geo_loss", "positive_advantage_raises_likelihood", 1e-8, [](Rng& rng, const SuiteOptions& o) {
    // A single masked location with A > 0 and A held fixed: the loss
    // derivative w.r.t. its logit is -A (1 - P) / |M|.
    Measurement m;
    for (int t = 0; t < 50; ++t, ++m.cases) {
      const int P = rng.integer(1, 3), H = rng.integer(2, 5), W = rng.integer(2, 5);
      const auto z = random_map(rng, P, H, W, -2, 2);
      const std::size_t n = z.values.size();
      const auto target = static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1));
      InstanceMaskSet masks(P, H, W);
      masks.values[target] = 1;
      masks.values[(target + 1) % n] = 1;
      AlignmentMap a(P, H, W);
      a.values[target] = rng.uniform(0.1, 2.1);
      auto loss_at = [&](double v) {
        auto zz = z;
        zz.values[target] = v;
        return gaco_loss(joint_softmax(zz), a, masks, o.objective.gaco);
      };
      const double h = 1e-5;
      const double fd = (loss_at(z.values[target] + h) - loss_at(z.values[target] - h)) / (2 * h);
      const double expected = -a.values[target] * (1.0 - joint_softmax(z).probabilities[target]) / 2.0;
      m.residual = std::max(m.residual, std::abs(fd - expected));
    }
    return m;
  }});
  return out;
}

// Free-energy minimization.

inline std::vector<PropertySpec> gibbs_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"gibbs", "numeric_matches_closed_form", 1e-8, [](Rng& rng, const SuiteOptions&) {
    // KL(numeric || closed) over 100 problems; non-convergence fails.
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      const auto num = minimize_free_energy_numeric(p);
      if (!num.converged) return Measurement{std::numeric_limits<double>::infinity(), m.cases + 1};
      m.residual = std::max(m.residual, kl_divergence(num.distribution, gibbs_closed_form(p)));
    }
    return m;
  }});
  out.push_back({"gibbs", "closed_form_is_optimal", 1e-12, [](Rng& rng, const SuiteOptions&) {
    // Largest amount by which a random simplex point undercuts F[Q*].
    Measurement m;
    for (int t = 0; t < 100; ++t) {
      const auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      const double f_star = free_energy(gibbs_closed_form(p), p);
      for (int i = 0; i < 1000; ++i, ++m.cases)
        m.residual = std::max(m.residual, f_star - free_energy(sample_dirichlet(p.size(), rng), p));
    }
    return m;
  }});
  return out;
}

inline std::vector<PropertySpec> gibbs_limit_properties() {
  auto sup = [](const SimplexDistribution& a, const SimplexDistribution& b) {
    return max_abs_diff(a.mass, b.mass);
  };
  std::vector<PropertySpec> out;
  out.push_back({"gibbs_limits", "energy_shift_invariance", 1e-12, [sup](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      const auto base = gibbs_closed_form(p);
      const double k = rng.uniform(-20, 20);
      for (double& e : p.energy) e += k;
      m.residual = std::max(m.residual, sup(gibbs_closed_form(p), base));
    }
    return m;
  }});
  out.push_back({"gibbs_limits", "temperature_absorption", 1e-12, [sup](Rng& rng, const SuiteOptions&) {
    // Scaling energy, geometry and temperature together leaves Q* unchanged.
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      const auto base = gibbs_closed_form(p);
      const double a = rng.uniform(0.05, 5.0);
      for (double& e : p.energy) e *= a;
      for (double& g : p.geometry) g *= a;
      p.temperature *= a;
      m.residual = std::max(m.residual, sup(gibbs_closed_form(p), base));
    }
    return m;
  }});
  out.push_back({"gibbs_limits", "hot_limit_is_uniform", 1e-6, [sup](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      p.temperature = 1e8;
      m.residual = std::max(m.residual, sup(gibbs_closed_form(p), SimplexDistribution::uniform(p.size())));
    }
    return m;
  }});
  out.push_back({"gibbs_limits", "cold_limit_is_argmin", 1e-6, [](Rng& rng, const SuiteOptions&) {
    // Residual is the mass missing from the minimizer.
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      auto p = random_gibbs_problem(rng, static_cast<std::size_t>(rng.integer(1, 64)));
      p.temperature = 1e-6;
      std::size_t best = 0;
      for (std::size_t i = 1; i < p.size(); ++i)
        if (p.effective_energy(i) < p.effective_energy(best)) best = i;
      m.residual = std::max(m.residual, 1.0 - gibbs_closed_form(p).mass[best]);
    }
    return m;
  }});
  return out;
}

// Instance-bag view.

inline std::vector<PropertySpec> mil_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"mil", "expectation_map_equivalence", 1e-12, [](Rng& rng, const SuiteOptions&) {
    // 200 instances of up to 4 prompts, 8 tokens and a 16 x 16 grid.
    Measurement m;
    for (int t = 0; t < 200; ++t, ++m.cases) {
      const int P = rng.integer(1, 4);
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const double tau = rng.uniform(0.1, 3.0);
      for (int p = 0; p < P; ++p) {
        const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
        const auto s = token_similarity(f, tok);
        const auto pi = token_posterior(s, tok.valid, tau);
        const auto eam = expectation_map(s, pi);
        const auto scores = mil_score(instance_vectors(s, pi));
        m.residual = std::max(m.residual, max_abs_diff(scores, eam.values));
        const auto from_bag = bag_posterior(instance_vectors(s), tok.valid, tau);
        m.residual = std::max(m.residual, max_abs_diff(from_bag.weights, pi.weights));
      }
    }
    return m;
  }});
  out.push_back({"mil", "instance_order_invariance", 1e-12, [](Rng& rng, const SuiteOptions&) {
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const auto f = random_features(rng, rng.integer(1, 8), rng.integer(1, 16), rng.integer(1, 16));
      const auto tok = random_tokens(rng, rng.integer(1, 8), f.channels);
      const auto s = token_similarity(f, tok);
      auto bag = instance_vectors(s, token_posterior(s, tok.valid, 1.0));
      const auto k = static_cast<std::size_t>(rng.integer(1, static_cast<int>(bag.instances.size())));
      const double before = bag_logit(mil_score(bag), k);
      std::shuffle(bag.instances.begin(), bag.instances.end(), rng);
      m.residual = std::max(m.residual, std::abs(bag_logit(mil_score(bag), k) - before));
    }
    return m;
  }});
  out.push_back({"mil", "pooling_endpoints", 1e-12, [](Rng& rng, const SuiteOptions&) {
    // k = 1 is max pooling and k = N is mean pooling.
    Measurement m;
    for (int t = 0; t < 100; ++t, ++m.cases) {
      const auto v = uniform_vec(rng, static_cast<std::size_t>(rng.integer(1, 256)), -5, 5);
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      m.residual = std::max(m.residual, std::abs(bag_logit(v, 1) - *std::max_element(v.begin(), v.end())));
      m.residual = std::max(m.residual, std::abs(bag_logit(v, v.size()) - mean));
    }
    return m;
  }});
  return out;
}

// Full-objective gradients.

inline std::vector<PropertySpec> gradient_properties() {
  std::vector<PropertySpec> out;
  out.push_back({"gradients", "analytic_matches_finite_difference", 1e-5, [](Rng& rng, const SuiteOptions& o) {
    // Two prompts on an 8 x 8 / 4 x 4 / 2 x 2 pyramid. Configurations within
    // 1e-2 of a top-k tie, the clip bound or a normalizer switch are skipped
    // because the objective is not differentiable there.
    Measurement m;
    int attempts = 0;
    while (static_cast<int>(m.cases) < o.gradient_configs) {
      if (++attempts > 100 * o.gradient_configs) return Measurement{std::numeric_limits<double>::infinity(), m.cases};
      const auto s = random_sample(rng, 2, 3, 3, 8, 8);
      const auto fw = forward(std::span<const Sample>(&s, 1), o.objective);
      if (!degeneracy_margins(std::span<const Sample>(&s, 1), fw, o.objective).clear_of(1e-2)) continue;
      m.residual = std::max(m.residual, gradient_check(s, o.objective, 1e-4).max_relative_error);
      ++m.cases;
    }
    return m;
  }});
  out.push_back({"gradients", "pad_tokens_zero_gradient", 0.0, [](Rng& rng, const SuiteOptions& o) {
    Measurement m;
    for (int t = 0; t < 20; ++t, ++m.cases) {
      const auto s = random_sample(rng, 3, 4, 3, 8, 8);
      const auto g = objective_with_gradients(s, o.objective);
      for (int p = 0; p < s.prompts(); ++p) {
        const auto& tok = s.tokens[p];
        for (int l = 0; l < tok.count(); ++l)
          if (!tok.valid[l])
            for (int c = 0; c < tok.channels; ++c)
              m.residual = std::max(m.residual, std::abs(g.samples[0].tokens[p][l * tok.channels + c]));
      }
    }
    return m;
  }});
  out.push_back({"gradients", "zero_weights_zero_gradient", 0.0, [](Rng& rng, const SuiteOptions& o) {
    ObjectiveConfig cfg = o.objective;
    cfg.lambda_sem = 0.0;
    cfg.lambda_geo = 0.0;
    Measurement m;
    for (int t = 0; t < 20; ++t, ++m.cases) {
      const auto g = objective_with_gradients(random_sample(rng, 2, 3, 3, 8, 8), cfg);
      m.residual = std::max(m.residual, std::abs(g.loss.total));
      for (double v : pack_gradient(g.samples[0])) m.residual = std::max(m.residual, std::abs(v));
    }
    return m;
  }});
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"eah",          "fusion", "sem_loss", "geo_loss", "gibbs",
                                              "gibbs_limits", "mil",    "gradients"};
  return names;
}

/// Every property, in report order.
inline std::vector<PropertySpec> all_properties() {
  std::vector<PropertySpec> out;
  for (auto&& group : {detail::eah_properties(), detail::fusion_properties(), detail::sem_loss_properties(),
                       detail::geo_loss_properties(), detail::gibbs_properties(),
                       detail::gibbs_limit_properties(), detail::mil_properties(),
                       detail::gradient_properties()})
    out.insert(out.end(), group.begin(), group.end());
  return out;
}

/// Properties of the named suites, in report order.
inline std::vector<PropertySpec> properties_of(const std::vector<std::string>& suites) {
  std::vector<PropertySpec> out;
  for (auto& p : all_properties())
    if (std::find(suites.begin(), suites.end(), p.suite) != suites.end()) out.push_back(std::move(p));
  return out;
}

/// Worker count: EXPALIGN_THREADS when set to a positive integer, otherwise
/// the hardware concurrency.
inline unsigned thread_budget() {
  unsigned n = 0;
  if (const char* env = std::getenv("EXPALIGN_THREADS")) n = static_cast<unsigned>(std::strtoul(env, nullptr, 10));
  if (n == 0) n = std::thread::hardware_concurrency();
  return std::max(n, 1u);
}

inline PropertyResult run_property(const PropertySpec& spec, const SuiteOptions& opts) {
  Rng rng(derive_seed(opts.seed, spec.suite + "/" + spec.name));
  PropertyResult r{spec.suite, spec.name, 0.0, spec.tolerance, 0, false, {}};
  try {
    const Measurement m = spec.run(rng, opts);
    r.residual = m.residual;
    r.cases = m.cases;
    r.passed = m.residual <= spec.tolerance;  // NaN fails
  } catch (const std::exception& e) {
    r.residual = std::numeric_limits<double>::infinity();
    r.error = e.what();
  }
  return r;
}

/// Runs the properties on up to `threads` workers; results keep input order.
inline std::vector<PropertyResult> run_properties(const std::vector<PropertySpec>& specs,
                                                  const SuiteOptions& opts, unsigned threads = 0) {
  std::vector<PropertyResult> results(specs.size());
  if (threads == 0) threads = thread_budget();
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(specs.size(), 1)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) results[i] = run_property(specs[i], opts);
  };
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  return results;
}

inline bool all_passed(const std::vector<PropertyResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const PropertyResult& r) { return r.passed; });
}

}  // namespace expalign
