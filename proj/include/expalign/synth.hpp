#pragma once

// Deterministic synthetic scenes with planted prompt-region alignment, and a
// small gradient-descent demo that trains a per-prompt additive token offset
// against the consistency objective.
//
// Random streams come from std::mt19937_64 (fully specified by the C++
// standard). Uniforms take the top 53 bits, (x >> 11) * 2^-53, and normals
// use the Box-Muller transform, one pair per two uniforms, cosine branch
// first. std::normal_distribution is avoided because its algorithm is
// implementation-defined.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "expalign/fusion.hpp"
#include "expalign/gradients.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

inline constexpr const char* kPrngName = "mt19937_64/box-muller";

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  using result_type = std::uint64_t;
  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer uniform on [lo, hi] (inclusive); modulo bias is irrelevant at these ranges.
  int integer(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(engine_() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Axis-aligned rectangle in P3 cells. Corners and extents are multiples of 4
/// so that the region maps exactly onto P4 and P5.
struct MaskRect {
  int row = 0;
  int col = 0;
  int rows = 0;
  int cols = 0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int prompts = 4;
  int tokens = 6;       // including pad tokens
  int pad_tokens = 1;   // trailing tokens marked invalid
  int channels = 32;
  int height = 16;      // P3 height
  int width = 16;       // P3 width
  double signal = 1.0;
  int negatives = 3;    // trailing prompts with no region in the image
  double token_noise = 0.5;
  double peak_floor = 0.25;  // see signal_profile
  /// Optional explicit rectangles for the positive prompts; generated from
  /// the seed when empty.
  std::vector<MaskRect> masks;
};

inline void check_scene_spec(const SceneSpec& spec) {
  detail::require_domain(spec.prompts >= 1 && spec.tokens >= 1 && spec.channels >= 1,
                         "SceneSpec: prompts, tokens and channels must be positive");
  detail::require_domain(spec.pad_tokens >= 0 && spec.pad_tokens < spec.tokens,
                         "SceneSpec: need at least one non-pad token");
  detail::require_domain(spec.height >= 4 && spec.width >= 4 && spec.height % 4 == 0 &&
                             spec.width % 4 == 0,
                         "SceneSpec: P3 dimensions must be positive multiples of 4");
  detail::require_domain(spec.negatives >= 0 && spec.negatives < spec.prompts,
                         "SceneSpec: need at least one positive prompt");
  detail::require_domain(spec.signal >= 0.0 && std::isfinite(spec.signal),
                         "SceneSpec: signal strength must be finite and >= 0");
  detail::require_domain(spec.token_noise >= 0.0, "SceneSpec: token noise must be >= 0");
  detail::require_domain(spec.peak_floor >= 0.0 && spec.peak_floor <= 1.0,
                         "SceneSpec: peak floor must lie in [0, 1]");
  const int positives = spec.prompts - spec.negatives;
  detail::require_domain(spec.masks.empty() || static_cast<int>(spec.masks.size()) == positives,
                         "SceneSpec: explicit masks must cover every positive prompt");
  for (const auto& m : spec.masks) {
    const bool aligned = m.row % 4 == 0 && m.col % 4 == 0 && m.rows % 4 == 0 && m.cols % 4 == 0;
    const bool inside = m.row >= 0 && m.col >= 0 && m.rows > 0 && m.cols > 0 &&
                        m.row + m.rows <= spec.height && m.col + m.cols <= spec.width;
    detail::require_domain(aligned && inside,
                           "SceneSpec: mask rectangles must be 4-aligned and inside the grid");
  }
}

/// Relative planted strength at a cell of a rectangle at pyramid factor
/// `factor`: a separable tent peaking at the rectangle centre, lifted so that
/// it never drops below `floor_`. floor_ = 1 gives a flat profile.
inline double signal_profile(const MaskRect& r, int factor, int row, int col, double floor_) {
  const double f = static_cast<double>(factor);
  const double centre_r = (r.row + 0.5 * r.rows) / f;
  const double centre_c = (r.col + 0.5 * r.cols) / f;
  const double half_r = 0.5 * r.rows / f + 0.5;
  const double half_c = 0.5 * r.cols / f + 0.5;
  const double tent = (1.0 - std::abs(row + 0.5 - centre_r) / half_r) *
                      (1.0 - std::abs(col + 0.5 - centre_c) / half_c);
  return floor_ + (1.0 - floor_) * tent;
}

/// Features are unit Gaussian noise; inside each positive prompt's rectangle
/// every scale additionally carries signal * profile * d_p for a random unit
/// direction d_p. Token 0 of every prompt is d_p plus Gaussian noise of norm about
/// token_noise; the remaining tokens are random vectors of norm about 1.
inline Sample generate_scene(const SceneSpec& spec) {
  check_scene_spec(spec);
  Rng rng(spec.seed);
  const int P = spec.prompts;
  const int C = spec.channels;
  const int positives = P - spec.negatives;
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(C));

  std::vector<std::vector<double>> directions(static_cast<std::size_t>(P));
  for (auto& d : directions) {
    d.resize(static_cast<std::size_t>(C));
    double norm = 0.0;
    for (auto& v : d) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : d) v /= norm;
  }

  std::vector<MaskRect> rects = spec.masks;
  if (rects.empty()) {
    const int h5 = spec.height / 4;
    const int w5 = spec.width / 4;
    for (int p = 0; p < positives; ++p) {
      const int rows5 = rng.integer(1, std::max(1, h5 / 2));
      const int cols5 = rng.integer(1, std::max(1, w5 / 2));
      const int r5 = rng.integer(0, h5 - rows5);
      const int c5 = rng.integer(0, w5 - cols5);
      rects.push_back(MaskRect{4 * r5, 4 * c5, 4 * rows5, 4 * cols5});
    }
  }

  Sample s;
  for (int sc = 0; sc < 3; ++sc) {
    const int factor = 1 << sc;
    FeatureMap fm(3 + sc, C, spec.height / factor, spec.width / factor);
    for (auto& v : fm.values) v = rng.normal();
    for (int p = 0; p < positives; ++p) {
      const auto& r = rects[p];
      for (int row = r.row / factor; row < (r.row + r.rows) / factor; ++row)
        for (int col = r.col / factor; col < (r.col + r.cols) / factor; ++col) {
          const double w = spec.signal * signal_profile(r, factor, row, col, spec.peak_floor);
          for (int c = 0; c < C; ++c) fm.at(c, row, col) += w * directions[p][c];
        }
    }
    s.features[sc] = std::move(fm);
  }

  for (int p = 0; p < P; ++p) {
    TokenBatch t(spec.tokens, C);
    for (int l = 0; l < spec.tokens; ++l) {
      for (int c = 0; c < C; ++c) {
        const double noise = rng.normal() * inv_sqrt_c;
        t.at(l, c) = l == 0 ? directions[p][c] + spec.token_noise * noise : noise;
      }
      t.valid[l] = l < spec.tokens - spec.pad_tokens;
    }
    s.tokens.push_back(std::move(t));
  }

  s.masks = InstanceMaskSet(P, spec.height, spec.width);
  for (int p = 0; p < positives; ++p) {
    const auto& r = rects[p];
    for (int row = r.row; row < r.row + r.rows; ++row)
      for (int col = r.col; col < r.col + r.cols; ++col) s.masks.at(p, row, col) = 1;
  }
  s.labels.total_prompts = P;
  for (int p = 0; p < positives; ++p) s.labels.positives.push_back(p);
  return s;
}

/// Unstructured random sample for gradient checks: Gaussian features and
/// tokens scaled by `scale`, one trailing pad token per prompt, a random
/// rectangle mask per prompt and prompt 0 as the only positive.
inline Sample random_sample(Rng& rng, int prompts, int tokens, int channels, int h3, int w3,
                            double scale = 1.0) {
  detail::require_domain(prompts >= 1 && tokens >= 2 && channels >= 1,
                         "random_sample: need a prompt, two tokens and a channel");
  detail::require_domain(h3 >= 4 && w3 >= 4 && h3 % 4 == 0 && w3 % 4 == 0,
                         "random_sample: P3 dimensions must be positive multiples of 4");
  Sample s;
  for (int sc = 0; sc < 3; ++sc) {
    FeatureMap fm(3 + sc, channels, h3 >> sc, w3 >> sc);
    for (double& v : fm.values) v = scale * rng.normal();
    s.features[sc] = std::move(fm);
  }
  for (int p = 0; p < prompts; ++p) {
    TokenBatch t(tokens, channels);
    for (double& v : t.embeddings) v = scale * rng.normal();
    t.valid[tokens - 1] = false;
    s.tokens.push_back(std::move(t));
  }
  s.masks = InstanceMaskSet(prompts, h3, w3);
  for (int p = 0; p < prompts; ++p) {
    const int r0 = rng.integer(0, h3 - 1), c0 = rng.integer(0, w3 - 1);
    const int r1 = rng.integer(r0, h3 - 1), c1 = rng.integer(c0, w3 - 1);
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) s.masks.at(p, r, c) = 1;
  }
  s.labels = PromptLabels{prompts, {0}};
  return s;
}

/// Expectation maps of every prompt at P3, P4 and P5.
inline ScalePyramid alignment_pyramid(const Sample& s, double token_temperature) {
  check_sample(s);
  return ScalePyramid{expectation_maps(s.features[0], s.tokens, token_temperature),
                      expectation_maps(s.features[1], s.tokens, token_temperature),
                      expectation_maps(s.features[2], s.tokens, token_temperature)};
}

/// Fraction of prompts with a nonempty mask whose highest fine fused cell
/// (lowest index on ties) lies inside that mask. Zero when no prompt has a mask.
inline double localization_accuracy(const Sample& s, double token_temperature) {
  const auto up = fuse_up(alignment_pyramid(s, token_temperature));
  int counted = 0;
  int hits = 0;
  for (int p = 0; p < s.prompts(); ++p) {
    const auto m = s.masks.slice(p);
    if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) continue;
    const auto v = up.slice(p);
    const auto best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    ++counted;
    hits += m[best] != 0;
  }
  return counted == 0 ? 0.0 : static_cast<double>(hits) / counted;
}

struct DemoReport {
  std::uint64_t seed = 0;
  int steps = 0;
  double learning_rate = 0.0;
  std::vector<double> sem;    // loss before each update
  std::vector<double> geo;
  std::vector<double> total;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  bool diverged = false;
  SceneSpec scene;
  ObjectiveConfig objective;
};

/// Plain gradient descent on an additive L x C offset per prompt, initialised
/// to zero so that the untrained model sees the original token embeddings.
/// When `trained` is given it receives the scene with the final tokens.
inline DemoReport demo_train(const SceneSpec& spec, int steps, double learning_rate,
                             const ObjectiveConfig& cfg, Sample* trained = nullptr) {
  detail::require_domain(steps >= 1, "demo_train: steps must be >= 1");
  detail::require_domain(std::isfinite(learning_rate), "demo_train: learning rate must be finite");
  check_config(cfg);
  DemoReport rep;
  rep.seed = spec.seed;
  rep.steps = steps;
  rep.learning_rate = learning_rate;
  rep.scene = spec;
  rep.objective = cfg;

  const Sample base = generate_scene(spec);
  Sample current = base;
  rep.accuracy_before = localization_accuracy(current, cfg.token_temperature);

  std::vector<std::vector<double>> offset(base.tokens.size());
  for (std::size_t p = 0; p < offset.size(); ++p)
    offset[p].assign(base.tokens[p].embeddings.size(), 0.0);

  for (int step = 0; step < steps; ++step) {
    const auto g = objective_with_gradients(current, cfg);
    rep.sem.push_back(g.loss.sem);
    rep.geo.push_back(g.loss.geo);
    rep.total.push_back(g.loss.total);
    if (!std::isfinite(g.loss.total)) {
      rep.diverged = true;
      break;
    }
    bool finite = true;
    for (std::size_t p = 0; p < offset.size(); ++p) {
      auto& emb = current.tokens[p].embeddings;
      for (std::size_t j = 0; j < offset[p].size(); ++j) {
        offset[p][j] -= learning_rate * g.samples[0].tokens[p][j];
        emb[j] = base.tokens[p].embeddings[j] + offset[p][j];
        finite = finite && std::isfinite(emb[j]);
      }
    }
    if (!finite) {
      rep.diverged = true;
      break;
    }
  }
  rep.accuracy_after =
      rep.diverged ? 0.0 : localization_accuracy(current, cfg.token_temperature);
  if (trained != nullptr) *trained = std::move(current);
  return rep;
}

/// Weak-signal benchmark: one scene per consecutive seed, trained
/// independently. The learning rate was tuned once for the default scene and
/// is kept fixed.
struct DemoBenchmark {
  SceneSpec scene;
  int steps = 500;
  double learning_rate = 10.0;
  std::uint64_t first_seed = 0;
  int seeds = 10;
};

struct BenchmarkResult {
  std::vector<DemoReport> runs;
  double mean_accuracy_before = 0.0;
  double mean_accuracy_after = 0.0;
};

/// `trained`, when given, receives each run's final scene.
inline BenchmarkResult run_benchmark(const DemoBenchmark& bench, const ObjectiveConfig& cfg,
                                     std::vector<Sample>* trained = nullptr) {
  detail::require_domain(bench.seeds >= 1, "run_benchmark: need at least one seed");
  BenchmarkResult out;
  for (int k = 0; k < bench.seeds; ++k) {
    SceneSpec spec = bench.scene;
    spec.seed = bench.first_seed + static_cast<std::uint64_t>(k);
    Sample final_scene;
    out.runs.push_back(demo_train(spec, bench.steps, bench.learning_rate, cfg,
                                  trained ? &final_scene : nullptr));
    if (trained) trained->push_back(std::move(final_scene));
    out.mean_accuracy_before += out.runs.back().accuracy_before;
    out.mean_accuracy_after += out.runs.back().accuracy_after;
  }
  out.mean_accuracy_before /= bench.seeds;
  out.mean_accuracy_after /= bench.seeds;
  return out;
}

}  // namespace expalign
