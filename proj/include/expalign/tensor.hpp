#pragma once

// Dense containers shared by every stage of the alignment pipeline.
// All storage is row-major, 64-bit, and owned by value.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace expalign {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline void require_domain(bool ok, const std::string& what) {
  if (!ok) throw DomainError(what);
}

template <std::floating_point T>
bool all_finite(std::span<const T> values) {
  for (T v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

/// Dense visual features of one pyramid level, stored channel-major (C x H x W).
struct FeatureMap {
  int scale = 3;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(int scale_, int channels_, int height_, int width_)
      : scale(scale_),
        channels(channels_),
        height(height_),
        width(width_),
        values(static_cast<std::size_t>(channels_) * height_ * width_, 0.0) {
    detail::require_dims(channels_ > 0 && height_ > 0 && width_ > 0,
                         "FeatureMap: dimensions must be positive");
  }

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

  double& at(int c, int row, int col) {
    return values[(static_cast<std::size_t>(c) * height + row) * width + col];
  }
  double at(int c, int row, int col) const {
    return values[(static_cast<std::size_t>(c) * height + row) * width + col];
  }
};

/// Token embeddings of one prompt (L x C) with a validity flag per token.
struct TokenBatch {
  int channels = 0;
  std::vector<double> embeddings;
  std::vector<bool> valid;

  TokenBatch() = default;
  TokenBatch(int count, int channels_)
      : channels(channels_),
        embeddings(static_cast<std::size_t>(count) * channels_, 0.0),
        valid(static_cast<std::size_t>(count), true) {
    detail::require_dims(count > 0 && channels_ > 0,
                         "TokenBatch: dimensions must be positive");
  }

  int count() const { return static_cast<int>(valid.size()); }

  double& at(int l, int c) {
    return embeddings[static_cast<std::size_t>(l) * channels + c];
  }
  double at(int l, int c) const {
    return embeddings[static_cast<std::size_t>(l) * channels + c];
  }

  bool any_valid() const {
    for (bool v : valid)
      if (v) return true;
    return false;
  }
};

/// Token-region inner products, location-major (H x W x L) so that the L
/// values of one location are contiguous.
struct SimilarityTensor {
  int height = 0;
  int width = 0;
  int tokens = 0;
  std::vector<double> values;

  SimilarityTensor() = default;
  SimilarityTensor(int height_, int width_, int tokens_)
      : height(height_),
        width(width_),
        tokens(tokens_),
        values(static_cast<std::size_t>(height_) * width_ * tokens_, 0.0) {}

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

  double& at(int row, int col, int l) {
    return values[(static_cast<std::size_t>(row) * width + col) * tokens + l];
  }
  double at(int row, int col, int l) const {
    return values[(static_cast<std::size_t>(row) * width + col) * tokens + l];
  }
  std::span<const double> location(std::size_t flat) const {
    return {values.data() + flat * tokens, static_cast<std::size_t>(tokens)};
  }
};

/// Per-prompt spatial score grids (P x H x W).
struct AlignmentMap {
  int prompts = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  AlignmentMap() = default;
  AlignmentMap(int prompts_, int height_, int width_, double fill = 0.0)
      : prompts(prompts_),
        height(height_),
        width(width_),
        values(static_cast<std::size_t>(prompts_) * height_ * width_, fill) {}

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

  double& at(int p, int row, int col) {
    return values[(static_cast<std::size_t>(p) * height + row) * width + col];
  }
  double at(int p, int row, int col) const {
    return values[(static_cast<std::size_t>(p) * height + row) * width + col];
  }

  std::span<double> slice(int p) {
    return {values.data() + static_cast<std::size_t>(p) * cells(), cells()};
  }
  std::span<const double> slice(int p) const {
    return {values.data() + static_cast<std::size_t>(p) * cells(), cells()};
  }

  bool same_shape(const AlignmentMap& other) const {
    return prompts == other.prompts && height == other.height && width == other.width;
  }
};

/// Binary instance masks at the finest pyramid resolution (P x H3 x W3).
struct InstanceMaskSet {
  int prompts = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  InstanceMaskSet() = default;
  InstanceMaskSet(int prompts_, int height_, int width_)
      : prompts(prompts_),
        height(height_),
        width(width_),
        values(static_cast<std::size_t>(prompts_) * height_ * width_, 0) {}

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

  std::uint8_t& at(int p, int row, int col) {
    return values[(static_cast<std::size_t>(p) * height + row) * width + col];
  }
  std::uint8_t at(int p, int row, int col) const {
    return values[(static_cast<std::size_t>(p) * height + row) * width + col];
  }
  std::span<const std::uint8_t> slice(int p) const {
    return {values.data() + static_cast<std::size_t>(p) * cells(), cells()};
  }

  /// Flat (row-major) indices of the positive region of prompt p.
  std::vector<std::size_t> region(int p) const {
    std::vector<std::size_t> out;
    auto m = slice(p);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] != 0) out.push_back(i);
    return out;
  }

  std::size_t total_positive() const {
    std::size_t n = 0;
    for (auto v : values) n += (v != 0);
    return n;
  }
};

}  // namespace expalign
