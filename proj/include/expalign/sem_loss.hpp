#pragma once

// Semantic constraint: top-K pooling of the coarse fused map and the
// multi-positive InfoNCE objective over pooled prompt logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "expalign/numeric.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

/// Positive prompt indices are zero-based.
struct PromptLabels {
  int total_prompts = 0;
  std::vector<int> positives;
};

struct TopKSelection {
  std::vector<std::size_t> indices;  // ordered by decreasing value

  std::size_t k() const { return indices.size(); }
};

struct PooledLogits {
  std::vector<double> values;
  double temperature = 0.25;
};

/// k = clamp(floor(H3 * W3 * ratio), 1, n_cells_dw). The default ratio is 1%.
/// The ratio is applied as a division by 1/ratio so that exact reciprocals
/// such as 100 give exact integer floors.
inline std::size_t topk_budget(int h3, int w3, std::size_t n_cells_dw,
                               double k_ratio = 0.01) {
  detail::require_domain(h3 > 0 && w3 > 0 && n_cells_dw > 0,
                         "topk_budget: dimensions must be positive");
  detail::require_domain(k_ratio > 0.0 && k_ratio <= 1.0,
                         "topk_budget: ratio must lie in (0, 1]");
  const double cells = static_cast<double>(h3) * static_cast<double>(w3);
  const auto raw = static_cast<std::size_t>(std::floor(cells / (1.0 / k_ratio)));
  return std::clamp<std::size_t>(raw, 1, n_cells_dw);
}

/// Indices of the k largest values; ties go to the lowest flat index.
template <std::floating_point T>
TopKSelection topk_select(std::span<const T> values, std::size_t k) {
  detail::require_domain(k >= 1 && k <= values.size(),
                         "topk_select: k=" + std::to_string(k) + " outside [1, " +
                             std::to_string(values.size()) + "]");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (values[a] != values[b]) return values[a] > values[b];
                      return a < b;
                    });
  order.resize(k);
  return TopKSelection{std::move(order)};
}

inline TopKSelection topk_select(std::span<const double> values, std::size_t k) {
  return topk_select<double>(values, k);
}

template <std::floating_point T>
T pooled_logit(std::span<const T> values, const TopKSelection& sel) {
  detail::require_domain(sel.k() > 0, "pooled_logit: empty selection");
  T acc = 0;
  for (std::size_t i : sel.indices) {
    detail::require_dims(i < values.size(), "pooled_logit: index out of bounds");
    acc += values[i];
  }
  return acc / static_cast<T>(sel.k());
}

inline double pooled_logit(std::span<const double> values, const TopKSelection& sel) {
  return pooled_logit<double>(values, sel);
}

inline void check_labels(const PromptLabels& labels, std::size_t prompts) {
  detail::require_domain(!labels.positives.empty(), "infonce: empty positive set");
  for (int p : labels.positives)
    detail::require_domain(p >= 0 && static_cast<std::size_t>(p) < prompts,
                           "infonce: positive index " + std::to_string(p) + " out of range");
}

/// -(1/|Pos|) * sum_{p in Pos} log softmax(l / tau)_p for one image.
inline double infonce_multi_positive(const PooledLogits& logits, const PromptLabels& labels) {
  detail::require_domain(logits.temperature > 0.0, "infonce: temperature must be > 0");
  check_labels(labels, logits.values.size());
  std::vector<double> scaled(logits.values.size());
  for (std::size_t p = 0; p < scaled.size(); ++p)
    scaled[p] = logits.values[p] / logits.temperature;
  const double lse = log_sum_exp<double>(scaled);
  double acc = 0.0;
  for (int p : labels.positives) acc += scaled[static_cast<std::size_t>(p)] - lse;
  return -acc / static_cast<double>(labels.positives.size());
}

/// d L / d l_q = (softmax(l / tau)_q - [q in Pos] / |Pos|) / tau.
inline std::vector<double> infonce_gradient(const PooledLogits& logits,
                                            const PromptLabels& labels) {
  detail::require_domain(logits.temperature > 0.0, "infonce: temperature must be > 0");
  check_labels(labels, logits.values.size());
  auto g = softmax<double>(logits.values, logits.temperature);
  const double share = 1.0 / static_cast<double>(labels.positives.size());
  for (int p : labels.positives) g[static_cast<std::size_t>(p)] -= share;
  for (double& v : g) v /= logits.temperature;
  return g;
}

}  // namespace expalign
