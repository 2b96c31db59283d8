#pragma once

// Multiple-instance view of the expectation head: each spatial location is
// an instance carrying its token-affinity vector, a prompt is a bag, and the
// pooled prompt logit is a top-K mean over instance scores.

#include <cstddef>
#include <span>
#include <vector>

#include "expalign/eah.hpp"
#include "expalign/sem_loss.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

struct InstanceBag {
  std::size_t tokens = 0;
  std::vector<std::vector<double>> instances;
  TokenPosterior posterior;
};

/// Row-major flattening of the grid into N = H * W instance vectors.
inline InstanceBag instance_vectors(const SimilarityTensor& s, TokenPosterior posterior = {}) {
  InstanceBag bag;
  bag.tokens = static_cast<std::size_t>(s.tokens);
  bag.instances.reserve(s.cells());
  for (std::size_t i = 0; i < s.cells(); ++i) {
    const auto v = s.location(i);
    bag.instances.emplace_back(v.begin(), v.end());
  }
  bag.posterior = std::move(posterior);
  return bag;
}

/// Token posterior computed from the bag alone (the instance-set mean).
inline TokenPosterior bag_posterior(const InstanceBag& bag, const std::vector<bool>& valid,
                                    double temperature) {
  detail::require_domain(!bag.instances.empty(), "bag_posterior: empty bag");
  std::vector<double> mean(bag.tokens, 0.0);
  for (const auto& v : bag.instances)
    for (std::size_t l = 0; l < bag.tokens; ++l) mean[l] += v[l];
  for (double& m : mean) m /= static_cast<double>(bag.instances.size());
  return posterior_from_means(mean, valid, temperature);
}

/// Per-instance score pi^T v_i.
inline std::vector<double> mil_score(const InstanceBag& bag) {
  detail::require_dims(bag.posterior.weights.size() == bag.tokens,
                       "mil_score: posterior length != token count");
  std::vector<double> scores;
  scores.reserve(bag.instances.size());
  for (const auto& v : bag.instances) {
    detail::require_dims(v.size() == bag.tokens, "mil_score: inconsistent instance length");
    double acc = 0.0;
    for (std::size_t l = 0; l < bag.tokens; ++l) acc += bag.posterior.weights[l] * v[l];
    scores.push_back(acc);
  }
  return scores;
}

/// Mean of the top-k instance scores (k = 1 is max pooling, k = N mean pooling).
inline double bag_logit(std::span<const double> scores, std::size_t k) {
  return pooled_logit(scores, topk_select(scores, k));
}

}  // namespace expalign
