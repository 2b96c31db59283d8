#pragma once

// Brute-force reference computations for the unit tests. These follow the
// defining formulas loop by loop and deliberately share no code with the
// library beyond the plain data containers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "expalign/tensor.hpp"

namespace expalign::oracle {

inline std::vector<double> similarity(const FeatureMap& f, const TokenBatch& t) {
  std::vector<double> s;
  for (int r = 0; r < f.height; ++r)
    for (int c = 0; c < f.width; ++c)
      for (int l = 0; l < t.count(); ++l) {
        double acc = 0.0;
        for (int ch = 0; ch < f.channels; ++ch) acc += f.at(ch, r, c) * t.at(l, ch);
        s.push_back(acc);
      }
  return s;
}

/// Expectation map from scratch: mean, masked softmax (no max shift), weighted sum.
inline std::vector<double> expectation(const std::vector<double>& s, int cells, int tokens,
                                       const std::vector<bool>& valid, double tau) {
  std::vector<double> mean(tokens, 0.0);
  for (int i = 0; i < cells; ++i)
    for (int l = 0; l < tokens; ++l) mean[l] += s[i * tokens + l] / cells;
  std::vector<double> w(tokens, 0.0);
  double z = 0.0;
  for (int l = 0; l < tokens; ++l)
    if (valid[l]) z += std::exp(mean[l] / tau);
  for (int l = 0; l < tokens; ++l)
    if (valid[l]) w[l] = std::exp(mean[l] / tau) / z;
  std::vector<double> out(cells, 0.0);
  for (int i = 0; i < cells; ++i)
    for (int l = 0; l < tokens; ++l) out[i] += w[l] * s[i * tokens + l];
  return out;
}

/// Direct fusion on a single-prompt grid stored row-major.
struct Grid {
  int h = 0, w = 0;
  std::vector<double> v;
  double operator()(int r, int c) const { return v[r * w + c]; }
};

inline Grid down(const Grid& g) {
  Grid o{g.h / 2, g.w / 2, {}};
  for (int r = 0; r < o.h; ++r)
    for (int c = 0; c < o.w; ++c)
      o.v.push_back((g(2 * r, 2 * c) + g(2 * r + 1, 2 * c) + g(2 * r, 2 * c + 1) +
                     g(2 * r + 1, 2 * c + 1)) / 4.0);
  return o;
}

inline Grid up(const Grid& g) {
  Grid o{g.h * 2, g.w * 2, {}};
  for (int r = 0; r < o.h; ++r)
    for (int c = 0; c < o.w; ++c) o.v.push_back(g(r / 2, c / 2));
  return o;
}

/// Direct per-cell evaluation of (Down((Down(S3)+S4)/2)+S5)/2.
inline Grid fuse_down(const Grid& s3, const Grid& s4, const Grid& s5) {
  Grid o{s5.h, s5.w, {}};
  for (int r = 0; r < s5.h; ++r)
    for (int c = 0; c < s5.w; ++c) {
      double mid_block = 0.0;
      for (int dr = 0; dr < 2; ++dr)
        for (int dc = 0; dc < 2; ++dc) {
          const int r4 = 2 * r + dr, c4 = 2 * c + dc;
          double fine = 0.0;
          for (int er = 0; er < 2; ++er)
            for (int ec = 0; ec < 2; ++ec) fine += s3(2 * r4 + er, 2 * c4 + ec);
          mid_block += (fine / 4.0 + s4(r4, c4)) / 2.0;
        }
      o.v.push_back((mid_block / 4.0 + s5(r, c)) / 2.0);
    }
  return o;
}

/// Direct per-cell evaluation of (Up((Up(S5)+S4)/2)+S3)/2.
inline Grid fuse_up(const Grid& s3, const Grid& s4, const Grid& s5) {
  Grid o{s3.h, s3.w, {}};
  for (int r = 0; r < s3.h; ++r)
    for (int c = 0; c < s3.w; ++c) {
      const double mid = (s5(r / 4, c / 4) + s4(r / 2, c / 2)) / 2.0;
      o.v.push_back((mid + s3(r, c)) / 2.0);
    }
  return o;
}

/// Indices of the k largest values via a full stable sort.
inline std::vector<std::size_t> topk(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] > v[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace expalign::oracle
