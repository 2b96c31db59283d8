#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace expalign {

template <std::floating_point T>
T log_sum_exp(std::span<const T> x) {
  if (x.empty()) return -std::numeric_limits<T>::infinity();
  const T m = *std::max_element(x.begin(), x.end());
  T acc = 0;
  for (T v : x) acc += std::exp(v - m);
  return m + std::log(acc);
}

/// Max-subtracted softmax of `x / temperature`.
template <std::floating_point T>
std::vector<T> softmax(std::span<const T> x, T temperature = T(1)) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  const T m = *std::max_element(x.begin(), x.end());
  T z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp((x[i] - m) / temperature);
    z += out[i];
  }
  for (T& v : out) v /= z;
  return out;
}

template <std::floating_point T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <std::floating_point T>
T sup_distance(std::span<const T> a, std::span<const T> b) {
  T d = 0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace expalign
