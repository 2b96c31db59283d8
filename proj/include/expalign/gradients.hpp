#pragma once

// The combined consistency objective
//   total = lambda_sem * L_sem + lambda_geo * L_geo
// over a batch of images, its reverse-mode gradient with respect to feature
// maps and token embeddings, and a central finite-difference oracle.
//
// Differentiation conventions:
//   - top-K index sets are locally constant;
//   - the GACO advantage A is detached (gradients flow only through log P);
//   - the clip's saturated branches are locally constant (implied by the above);
//   - the GACO normalizer max|S_up| is differentiated through its argmax.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "expalign/eah.hpp"
#include "expalign/fusion.hpp"
#include "expalign/geo_loss.hpp"
#include "expalign/sem_loss.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

/// One image: features at P3, P4, P5, one token batch per prompt, the
/// prompts' instance masks at P3 resolution, and the positive prompts.
struct Sample {
  std::array<FeatureMap, 3> features;
  std::vector<TokenBatch> tokens;
  InstanceMaskSet masks;
  PromptLabels labels;

  int prompts() const { return static_cast<int>(tokens.size()); }
};

struct ObjectiveConfig {
  double token_temperature = 1.0;
  double temperature = 0.25;
  double lambda_sem = 0.5;
  double lambda_geo = 1.0;
  double k_ratio = 0.01;
  GacoConfig gaco;
};

struct LossBreakdown {
  double sem = 0.0;
  double geo = 0.0;
  double total = 0.0;
};

inline void check_config(const ObjectiveConfig& cfg) {
  detail::require_domain(cfg.token_temperature > 0.0, "objective: token temperature must be > 0");
  detail::require_domain(cfg.temperature > 0.0, "objective: temperature must be > 0");
  detail::require_domain(cfg.lambda_sem >= 0.0 && std::isfinite(cfg.lambda_sem) &&
                             cfg.lambda_geo >= 0.0 && std::isfinite(cfg.lambda_geo),
                         "objective: loss weights must be finite and >= 0");
  detail::require_domain(cfg.gaco.clip > 0.0 && std::isfinite(cfg.gaco.clip),
                         "objective: clip must be finite and > 0");
  detail::require_domain(cfg.gaco.epsilon > 0.0 && std::isfinite(cfg.gaco.epsilon),
                         "objective: epsilon must be finite and > 0");
}

inline void check_sample(const Sample& s) {
  const auto& f = s.features;
  detail::require_dims(f[0].scale == 3 && f[1].scale == 4 && f[2].scale == 5,
                       "Sample: features must be ordered P3, P4, P5");
  detail::require_dims(f[0].channels == f[1].channels && f[1].channels == f[2].channels,
                       "Sample: channel count differs across scales");
  detail::require_dims(f[0].height == 2 * f[1].height && f[1].height == 2 * f[2].height &&
                           f[0].width == 2 * f[1].width && f[1].width == 2 * f[2].width,
                       "Sample: feature pyramid violates H3 = 2*H4 = 4*H5");
  detail::require_dims(!s.tokens.empty(), "Sample: no prompts");
  for (const auto& t : s.tokens) {
    detail::require_dims(t.channels == f[0].channels, "Sample: token channels != feature channels");
    detail::require_domain(t.any_valid(), "Sample: prompt without valid tokens");
  }
  detail::require_dims(s.masks.prompts == s.prompts() && s.masks.height == f[0].height &&
                           s.masks.width == f[0].width,
                       "Sample: masks must be P x H3 x W3");
  detail::require_dims(s.labels.total_prompts == s.prompts(),
                       "Sample: label prompt count != token batch count");
}

/// Similarity and posterior of one prompt at one scale.
struct EamTrace {
  SimilarityTensor similarity;
  TokenPosterior posterior;
};

struct SampleForward {
  std::array<std::vector<EamTrace>, 3> traces;  // [scale][prompt]
  ScalePyramid pyramid;
  AlignmentMap fused_down;
  AlignmentMap fused_up;
  std::vector<TopKSelection> selections;
  PooledLogits logits;
  double sem = 0.0;
  GacoEvaluation gaco;
};

struct ForwardPass {
  std::vector<SampleForward> samples;
  LossBreakdown loss;
  std::size_t masked_pairs = 0;
};

namespace detail {

inline AlignmentMap eam_stack(const FeatureMap& fm, const Sample& s,
                              double token_temperature, std::vector<EamTrace>& traces) {
  AlignmentMap out(s.prompts(), fm.height, fm.width);
  traces.clear();
  for (int p = 0; p < s.prompts(); ++p) {
    EamTrace tr;
    tr.similarity = token_similarity(fm, s.tokens[p]);
    tr.posterior = token_posterior(tr.similarity, s.tokens[p].valid, token_temperature);
    const auto m = expectation_map(tr.similarity, tr.posterior);
    std::copy(m.values.begin(), m.values.end(), out.slice(p).begin());
    traces.push_back(std::move(tr));
  }
  return out;
}

}  // namespace detail

/// Forward evaluation of the whole batch. When `frozen_advantage` is given
/// (one map per sample) it replaces the computed advantages; finite
/// differences of that function are the oracle for the detached-A gradient.
inline ForwardPass forward(std::span<const Sample> batch, const ObjectiveConfig& cfg,
                           const std::vector<AlignmentMap>* frozen_advantage = nullptr) {
  check_config(cfg);
  detail::require_domain(!batch.empty(), "objective: empty batch");
  detail::require_dims(!frozen_advantage || frozen_advantage->size() == batch.size(),
                       "objective: frozen advantage count != batch size");
  ForwardPass fw;
  fw.samples.resize(batch.size());
  std::vector<GacoTerm> terms(batch.size());
  double sem_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& s = batch[b];
    check_sample(s);
    auto& out = fw.samples[b];
    out.pyramid.p3 = detail::eam_stack(s.features[0], s, cfg.token_temperature, out.traces[0]);
    out.pyramid.p4 = detail::eam_stack(s.features[1], s, cfg.token_temperature, out.traces[1]);
    out.pyramid.p5 = detail::eam_stack(s.features[2], s, cfg.token_temperature, out.traces[2]);
    out.fused_down = fuse_down(out.pyramid);
    out.fused_up = fuse_up(out.pyramid);

    const std::size_t k =
        topk_budget(s.features[0].height, s.features[0].width, out.fused_down.cells(), cfg.k_ratio);
    out.logits.temperature = cfg.temperature;
    for (int p = 0; p < s.prompts(); ++p) {
      out.selections.push_back(topk_select(out.fused_down.slice(p), k));
      out.logits.values.push_back(pooled_logit(out.fused_down.slice(p), out.selections.back()));
    }
    out.sem = infonce_multi_positive(out.logits, s.labels);
    sem_sum += out.sem;

    out.gaco = evaluate_gaco(out.fused_up, s.masks, cfg.gaco);
    if (frozen_advantage) {
      const auto& fa = (*frozen_advantage)[b];
      detail::require_dims(fa.same_shape(out.gaco.advantage),
                           "objective: frozen advantage shape mismatch");
      out.gaco.advantage = fa;
    }
    fw.masked_pairs += s.masks.total_positive();
  }
  for (std::size_t b = 0; b < batch.size(); ++b)
    terms[b] = GacoTerm{&fw.samples[b].gaco.distribution, &fw.samples[b].gaco.advantage,
                        &batch[b].masks};
  fw.loss.sem = sem_sum / static_cast<double>(batch.size());
  fw.loss.geo = gaco_loss(terms, cfg.gaco);
  fw.loss.total = cfg.lambda_sem * fw.loss.sem + cfg.lambda_geo * fw.loss.geo;
  return fw;
}

inline LossBreakdown objective(std::span<const Sample> batch, const ObjectiveConfig& cfg) {
  return forward(batch, cfg).loss;
}

inline LossBreakdown objective(const Sample& sample, const ObjectiveConfig& cfg) {
  return objective(std::span<const Sample>(&sample, 1), cfg);
}

struct SampleGradient {
  std::array<std::vector<double>, 3> features;  // same layout as FeatureMap::values
  std::vector<std::vector<double>> tokens;      // same layout as TokenBatch::embeddings
};

struct GradientBundle {
  std::vector<SampleGradient> samples;
  LossBreakdown loss;
};

namespace detail {

/// Backward through S -> (S_bar, pi) -> EAM for one prompt at one scale.
inline void eam_backward(const FeatureMap& fm, const TokenBatch& tokens, const EamTrace& tr,
                         std::span<const double> g_map, double token_temperature,
                         std::vector<double>& g_features, std::vector<double>& g_tokens) {
  const int L = tr.similarity.tokens;
  const int C = fm.channels;
  const std::size_t N = tr.similarity.cells();
  const auto& S = tr.similarity.values;
  const auto& pi = tr.posterior.weights;

  std::vector<double> g_pi(static_cast<std::size_t>(L), 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (int l = 0; l < L; ++l) g_pi[l] += g_map[i] * S[i * L + l];
  double mean_g = 0.0;
  for (int l = 0; l < L; ++l) mean_g += pi[l] * g_pi[l];
  std::vector<double> g_mean(static_cast<std::size_t>(L), 0.0);
  for (int l = 0; l < L; ++l)
    g_mean[l] = tokens.valid[l] ? pi[l] * (g_pi[l] - mean_g) / token_temperature : 0.0;

  std::vector<double> g_s(static_cast<std::size_t>(L));
  for (std::size_t i = 0; i < N; ++i) {
    for (int l = 0; l < L; ++l)
      g_s[l] = g_map[i] * pi[l] + g_mean[l] / static_cast<double>(N);
    for (int l = 0; l < L; ++l) {
      if (g_s[l] == 0.0) continue;
      for (int c = 0; c < C; ++c) {
        g_features[static_cast<std::size_t>(c) * N + i] += g_s[l] * tokens.at(l, c);
        g_tokens[static_cast<std::size_t>(l) * C + c] +=
            g_s[l] * fm.values[static_cast<std::size_t>(c) * N + i];
      }
    }
  }
}

}  // namespace detail

inline GradientBundle objective_with_gradients(std::span<const Sample> batch,
                                               const ObjectiveConfig& cfg) {
  const ForwardPass fw = forward(batch, cfg);
  GradientBundle out;
  out.loss = fw.loss;
  out.samples.resize(batch.size());
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const double geo_scale =
      fw.masked_pairs == 0
          ? 0.0
          : cfg.lambda_geo * cfg.gaco.beta / static_cast<double>(fw.masked_pairs);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& s = batch[b];
    const SampleForward& f = fw.samples[b];
    const int P = s.prompts();

    // Semantic branch: d total / d fused_down.
    AlignmentMap g_down(P, f.fused_down.height, f.fused_down.width);
    if (cfg.lambda_sem != 0.0) {
      const auto g_logits = infonce_gradient(f.logits, s.labels);
      for (int p = 0; p < P; ++p) {
        const auto& sel = f.selections[p];
        const double share = cfg.lambda_sem * inv_batch * g_logits[p] / static_cast<double>(sel.k());
        auto g = g_down.slice(p);
        for (std::size_t i : sel.indices) g[i] += share;
      }
    }

    // Geometry branch: d total / d logits z, then through the normalizer.
    AlignmentMap g_up(P, f.fused_up.height, f.fused_up.width);
    if (geo_scale != 0.0) {
      const auto& adv = f.gaco.advantage.values;
      const auto& prob = f.gaco.distribution.probabilities;
      double adv_sum = 0.0;
      for (std::size_t j = 0; j < adv.size(); ++j)
        if (s.masks.values[j] != 0) adv_sum += adv[j];
      AlignmentMap g_z(P, f.fused_up.height, f.fused_up.width);
      for (std::size_t j = 0; j < adv.size(); ++j) {
        const double a = s.masks.values[j] != 0 ? adv[j] : 0.0;
        g_z.values[j] = -geo_scale * (a - prob[j] * adv_sum);
      }
      const double denom = max_abs(f.fused_up.values) + cfg.gaco.epsilon;
      if (!cfg.gaco.normalize || denom == 0.0) {
        g_up = std::move(g_z);
      } else {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < f.fused_up.values.size(); ++j)
          if (std::abs(f.fused_up.values[j]) > std::abs(f.fused_up.values[arg])) arg = j;
        double dot = 0.0;
        for (std::size_t j = 0; j < g_z.values.size(); ++j) {
          g_up.values[j] = g_z.values[j] / denom;
          dot += g_z.values[j] * f.fused_up.values[j];
        }
        const double sign = f.fused_up.values[arg] >= 0.0 ? 1.0 : -1.0;
        g_up.values[arg] -= sign * dot / (denom * denom);
      }
    }

    // Fusion adjoints back to the per-scale expectation maps.
    // up = (Up((Up(M5) + M4) / 2) + M3) / 2
    AlignmentMap g3(P, f.pyramid.p3.height, f.pyramid.p3.width);
    AlignmentMap g4(P, f.pyramid.p4.height, f.pyramid.p4.width);
    AlignmentMap g5(P, f.pyramid.p5.height, f.pyramid.p5.width);
    {
      AlignmentMap half = g_up;
      for (double& v : half.values) v *= 0.5;
      for (std::size_t j = 0; j < g3.values.size(); ++j) g3.values[j] += half.values[j];
      AlignmentMap g_mid = upsample2x_adjoint(half);
      for (double& v : g_mid.values) v *= 0.5;
      for (std::size_t j = 0; j < g4.values.size(); ++j) g4.values[j] += g_mid.values[j];
      const AlignmentMap g5_up = upsample2x_adjoint(g_mid);
      for (std::size_t j = 0; j < g5.values.size(); ++j) g5.values[j] += g5_up.values[j];
    }
    // down = (Down((Down(M3) + M4) / 2) + M5) / 2
    {
      AlignmentMap half = g_down;
      for (double& v : half.values) v *= 0.5;
      for (std::size_t j = 0; j < g5.values.size(); ++j) g5.values[j] += half.values[j];
      AlignmentMap g_mid = downsample2x_adjoint(half);
      for (double& v : g_mid.values) v *= 0.5;
      for (std::size_t j = 0; j < g4.values.size(); ++j) g4.values[j] += g_mid.values[j];
      const AlignmentMap g3_down = downsample2x_adjoint(g_mid);
      for (std::size_t j = 0; j < g3.values.size(); ++j) g3.values[j] += g3_down.values[j];
    }

    SampleGradient& sg = out.samples[b];
    sg.tokens.resize(static_cast<std::size_t>(P));
    for (int p = 0; p < P; ++p) sg.tokens[p].assign(s.tokens[p].embeddings.size(), 0.0);
    const std::array<const AlignmentMap*, 3> g_scales{&g3, &g4, &g5};
    for (int sc = 0; sc < 3; ++sc) {
      sg.features[sc].assign(s.features[sc].values.size(), 0.0);
      for (int p = 0; p < P; ++p)
        detail::eam_backward(s.features[sc], s.tokens[p], f.traces[sc][p],
                             g_scales[sc]->slice(p), cfg.token_temperature, sg.features[sc],
                             sg.tokens[p]);
    }
  }
  return out;
}

inline GradientBundle objective_with_gradients(const Sample& sample, const ObjectiveConfig& cfg) {
  return objective_with_gradients(std::span<const Sample>(&sample, 1), cfg);
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <typename F>
  requires std::invocable<F&, std::span<const double>>
std::vector<double> finite_difference_gradient(F&& f, std::span<const double> point,
                                               double h = 1e-4) {
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(std::span<const double>(x));
    x[i] = orig - h;
    const double down = f(std::span<const double>(x));
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Flattening of a sample's differentiable inputs: P3, P4, P5 feature values
// followed by each prompt's token embeddings.

inline std::vector<double> pack_parameters(const Sample& s) {
  std::vector<double> out;
  for (const auto& f : s.features) out.insert(out.end(), f.values.begin(), f.values.end());
  for (const auto& t : s.tokens) out.insert(out.end(), t.embeddings.begin(), t.embeddings.end());
  return out;
}

inline void unpack_parameters(std::span<const double> x, Sample& s) {
  std::size_t pos = 0;
  auto take = [&](std::vector<double>& dst) {
    detail::require_dims(pos + dst.size() <= x.size(), "unpack_parameters: vector too short");
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(pos),
              x.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()), dst.begin());
    pos += dst.size();
  };
  for (auto& f : s.features) take(f.values);
  for (auto& t : s.tokens) take(t.embeddings);
  detail::require_dims(pos == x.size(), "unpack_parameters: vector too long");
}

inline std::vector<double> pack_gradient(const SampleGradient& g) {
  std::vector<double> out;
  for (const auto& f : g.features) out.insert(out.end(), f.begin(), f.end());
  for (const auto& t : g.tokens) out.insert(out.end(), t.begin(), t.end());
  return out;
}

/// Distances from the non-differentiable boundaries of the objective at a
/// point: the gap between the k-th and (k+1)-th coarse fused values, the
/// distance of any masked advantage from the clip bound, and the gap between
/// the two largest |fine fused| values that select the normalizer.
struct DegeneracyMargins {
  double topk = std::numeric_limits<double>::infinity();
  double clip = std::numeric_limits<double>::infinity();
  double normalizer = std::numeric_limits<double>::infinity();

  bool clear_of(double tol) const { return topk >= tol && clip >= tol && normalizer >= tol; }
};

inline DegeneracyMargins degeneracy_margins(std::span<const Sample> batch, const ForwardPass& fw,
                                            const ObjectiveConfig& cfg) {
  DegeneracyMargins m;
  for (std::size_t b = 0; b < fw.samples.size(); ++b) {
    const auto& f = fw.samples[b];
    for (int p = 0; p < f.fused_down.prompts; ++p) {
      const auto v = f.fused_down.slice(p);
      const std::size_t k = f.selections[p].k();
      if (k >= v.size()) continue;
      std::vector<double> sorted(v.begin(), v.end());
      std::sort(sorted.rbegin(), sorted.rend());
      m.topk = std::min(m.topk, sorted[k - 1] - sorted[k]);
    }
    const auto& masks = batch[b].masks.values;
    for (std::size_t j = 0; j < masks.size(); ++j)
      if (masks[j] != 0)
        m.clip = std::min(m.clip, cfg.gaco.clip - std::abs(f.gaco.advantage.values[j]));
    if (cfg.gaco.normalize && f.fused_up.values.size() > 1) {
      std::vector<double> mag;
      for (double v : f.fused_up.values) mag.push_back(std::abs(v));
      std::partial_sort(mag.begin(), mag.begin() + 2, mag.end(), std::greater<>());
      m.normalizer = std::min(m.normalizer, mag[0] - mag[1]);
    }
  }
  return m;
}

struct GradientCheck {
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;  // denominator max(|analytic|, |numeric|, 1e-8)
  double max_absolute_error = 0.0;
  DegeneracyMargins margins;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Analytic gradient of one sample against central differences of the
/// objective with the advantage frozen at the base point.
inline GradientCheck gradient_check(const Sample& sample, const ObjectiveConfig& cfg,
                                    double h = 1e-4) {
  const std::span<const Sample> one(&sample, 1);
  const ForwardPass base = forward(one, cfg);
  const std::vector<AlignmentMap> frozen{base.samples[0].gaco.advantage};
  GradientCheck out;
  out.analytic = pack_gradient(objective_with_gradients(sample, cfg).samples[0]);
  const auto& analytic = out.analytic;

  Sample work = sample;
  auto f = [&](std::span<const double> x) {
    unpack_parameters(x, work);
    return forward(std::span<const Sample>(&work, 1), cfg, &frozen).loss.total;
  };
  out.numeric = finite_difference_gradient(f, pack_parameters(sample), h);
  const auto& numeric = out.numeric;

  out.coordinates = analytic.size();
  out.margins = degeneracy_margins(one, base, cfg);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    out.max_absolute_error = std::max(out.max_absolute_error, diff);
    out.max_relative_error = std::max(out.max_relative_error, diff / denom);
  }
  return out;
}

}  // namespace expalign
