#pragma once

// Expectation alignment head: token-region similarity, spatially pooled
// token posterior, and the posterior-weighted expectation map.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "expalign/tensor.hpp"

namespace expalign {

struct TokenPosterior {
  std::vector<double> weights;
  double temperature = 1.0;
};

/// S(row, col, l) = <F(:, row, col), T(l, :)> for every token, pads included.
inline SimilarityTensor token_similarity(const FeatureMap& features,
                                         const TokenBatch& tokens) {
  detail::require_dims(features.channels == tokens.channels,
                       "token_similarity: feature channels (" +
                           std::to_string(features.channels) +
                           ") != token channels (" + std::to_string(tokens.channels) + ")");
  const int L = tokens.count();
  const int C = features.channels;
  const std::size_t N = features.cells();
  SimilarityTensor s(features.height, features.width, L);
  for (std::size_t i = 0; i < N; ++i) {
    for (int l = 0; l < L; ++l) {
      double acc = 0.0;
      for (int c = 0; c < C; ++c)
        acc += features.values[static_cast<std::size_t>(c) * N + i] * tokens.at(l, c);
      s.values[i * L + l] = acc;
    }
  }
  return s;
}

/// Spatial mean of each token's similarity field, over all locations.
inline std::vector<double> spatial_token_mean(const SimilarityTensor& s) {
  std::vector<double> mean(static_cast<std::size_t>(s.tokens), 0.0);
  const std::size_t N = s.cells();
  for (std::size_t i = 0; i < N; ++i)
    for (int l = 0; l < s.tokens; ++l) mean[l] += s.values[i * s.tokens + l];
  for (double& m : mean) m /= static_cast<double>(N);
  return mean;
}

/// Softmax of pooled token evidence over valid tokens. Invalid tokens are
/// masked out before exponentiation and get exactly zero weight.
inline TokenPosterior posterior_from_means(std::span<const double> means,
                                           const std::vector<bool>& valid,
                                           double temperature) {
  detail::require_domain(temperature > 0.0, "token_posterior: temperature must be > 0");
  detail::require_dims(means.size() == valid.size(),
                       "token_posterior: validity mask length mismatch");
  double top = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t l = 0; l < means.size(); ++l) {
    if (!valid[l]) continue;
    any = true;
    top = std::max(top, means[l]);
  }
  detail::require_domain(any, "token_posterior: no valid tokens");

  TokenPosterior pi;
  pi.temperature = temperature;
  pi.weights.assign(means.size(), 0.0);
  double z = 0.0;
  for (std::size_t l = 0; l < means.size(); ++l) {
    if (!valid[l]) continue;
    pi.weights[l] = std::exp((means[l] - top) / temperature);
    z += pi.weights[l];
  }
  for (double& w : pi.weights) w /= z;
  return pi;
}

inline TokenPosterior token_posterior(const SimilarityTensor& s,
                                      const std::vector<bool>& valid,
                                      double temperature) {
  detail::require_dims(valid.size() == static_cast<std::size_t>(s.tokens),
                       "token_posterior: validity mask length mismatch");
  const auto means = spatial_token_mean(s);
  return posterior_from_means(means, valid, temperature);
}

/// Single-prompt expectation map: sum_l pi(l) * S(:, :, l).
inline AlignmentMap expectation_map(const SimilarityTensor& s, const TokenPosterior& pi) {
  detail::require_dims(pi.weights.size() == static_cast<std::size_t>(s.tokens),
                       "expectation_map: posterior length != token count");
  AlignmentMap out(1, s.height, s.width);
  const std::size_t N = s.cells();
  const int L = s.tokens;
  for (std::size_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (int l = 0; l < L; ++l) acc += pi.weights[l] * s.values[i * L + l];
    out.values[i] = acc;
  }
  return out;
}

/// Expectation maps of every prompt at one scale, stacked into a P x H x W map.
inline AlignmentMap expectation_maps(const FeatureMap& features,
                                     std::span<const TokenBatch> prompts,
                                     double token_temperature) {
  AlignmentMap out(static_cast<int>(prompts.size()), features.height, features.width);
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto s = token_similarity(features, prompts[p]);
    const auto pi = token_posterior(s, prompts[p].valid, token_temperature);
    const auto m = expectation_map(s, pi);
    std::copy(m.values.begin(), m.values.end(), out.slice(static_cast<int>(p)).begin());
  }
  return out;
}

}  // namespace expalign
