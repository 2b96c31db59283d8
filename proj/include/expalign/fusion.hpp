#pragma once

// Resolution-aligned multi-scale fusion of expectation maps.
// Down is 2x2 average pooling, Up is 2x nearest-neighbour replication.

#include <string>

#include "expalign/tensor.hpp"

namespace expalign {

struct ScalePyramid {
  AlignmentMap p3;
  AlignmentMap p4;
  AlignmentMap p5;
};

inline void check_pyramid(const ScalePyramid& pyr) {
  const bool prompts_ok =
      pyr.p3.prompts == pyr.p4.prompts && pyr.p4.prompts == pyr.p5.prompts;
  const bool dims_ok = pyr.p3.height == 2 * pyr.p4.height &&
                       pyr.p4.height == 2 * pyr.p5.height &&
                       pyr.p3.width == 2 * pyr.p4.width && pyr.p4.width == 2 * pyr.p5.width &&
                       pyr.p5.height > 0 && pyr.p5.width > 0;
  detail::require_dims(prompts_ok, "ScalePyramid: prompt counts differ across scales");
  detail::require_dims(dims_ok, "ScalePyramid: expected H3 = 2*H4 = 4*H5 (and widths), got " +
                                    std::to_string(pyr.p3.height) + "x" +
                                    std::to_string(pyr.p3.width) + ", " +
                                    std::to_string(pyr.p4.height) + "x" +
                                    std::to_string(pyr.p4.width) + ", " +
                                    std::to_string(pyr.p5.height) + "x" +
                                    std::to_string(pyr.p5.width));
}

inline AlignmentMap downsample2x(const AlignmentMap& m) {
  detail::require_dims(m.height % 2 == 0 && m.width % 2 == 0,
                       "downsample2x: odd map dimensions " + std::to_string(m.height) + "x" +
                           std::to_string(m.width));
  AlignmentMap out(m.prompts, m.height / 2, m.width / 2);
  for (int p = 0; p < m.prompts; ++p)
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c)
        out.at(p, r, c) = 0.25 * (m.at(p, 2 * r, 2 * c) + m.at(p, 2 * r, 2 * c + 1) +
                                  m.at(p, 2 * r + 1, 2 * c) + m.at(p, 2 * r + 1, 2 * c + 1));
  return out;
}

inline AlignmentMap upsample2x(const AlignmentMap& m) {
  AlignmentMap out(m.prompts, m.height * 2, m.width * 2);
  for (int p = 0; p < m.prompts; ++p)
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c) out.at(p, r, c) = m.at(p, r / 2, c / 2);
  return out;
}

// Adjoints used by the backward pass.

/// Transpose of upsample2x: sums each 2x2 block.
inline AlignmentMap upsample2x_adjoint(const AlignmentMap& g) {
  AlignmentMap out(g.prompts, g.height / 2, g.width / 2);
  for (int p = 0; p < g.prompts; ++p)
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c) out.at(p, r / 2, c / 2) += g.at(p, r, c);
  return out;
}

/// Transpose of downsample2x: spreads a quarter of each cell over its block.
inline AlignmentMap downsample2x_adjoint(const AlignmentMap& g) {
  AlignmentMap out(g.prompts, g.height * 2, g.width * 2);
  for (int p = 0; p < g.prompts; ++p)
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c) out.at(p, r, c) = 0.25 * g.at(p, r / 2, c / 2);
  return out;
}

namespace detail {

inline AlignmentMap average(const AlignmentMap& a, const AlignmentMap& b) {
  AlignmentMap out(a.prompts, a.height, a.width);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = (a.values[i] + b.values[i]) / 2.0;
  return out;
}

}  // namespace detail

/// Coarse unified map at P5 resolution:
/// (Down((Down(S3) + S4) / 2) + S5) / 2.
inline AlignmentMap fuse_down(const ScalePyramid& pyr) {
  check_pyramid(pyr);
  const auto mid = detail::average(downsample2x(pyr.p3), pyr.p4);
  return detail::average(downsample2x(mid), pyr.p5);
}

/// Fine unified map at P3 resolution:
/// (Up((Up(S5) + S4) / 2) + S3) / 2.
inline AlignmentMap fuse_up(const ScalePyramid& pyr) {
  check_pyramid(pyr);
  const auto mid = detail::average(upsample2x(pyr.p5), pyr.p4);
  return detail::average(upsample2x(mid), pyr.p3);
}

}  // namespace expalign
