#include <gtest/gtest.h>

#include <random>

#include "expalign/fusion.hpp"
#include "oracles.hpp"

using namespace expalign;

namespace {

AlignmentMap random_map(std::mt19937_64& rng, int P, int H, int W) {
  AlignmentMap m(P, H, W);
  m.values = oracle::random_vector(rng, m.values.size(), -4.0, 4.0);
  return m;
}

ScalePyramid random_pyramid(std::mt19937_64& rng, int P, int H5, int W5) {
  return {random_map(rng, P, 4 * H5, 4 * W5), random_map(rng, P, 2 * H5, 2 * W5),
          random_map(rng, P, H5, W5)};
}

ScalePyramid constant_pyramid(int P, int H5, int W5, double a, double b, double c) {
  return {AlignmentMap(P, 4 * H5, 4 * W5, a), AlignmentMap(P, 2 * H5, 2 * W5, b),
          AlignmentMap(P, H5, W5, c)};
}

oracle::Grid grid_of(const AlignmentMap& m, int p) {
  const auto s = m.slice(p);
  return {m.height, m.width, {s.begin(), s.end()}};
}

}  // namespace

TEST(Downsample, ConstantStaysConstant) {
  const auto d = downsample2x(AlignmentMap(2, 4, 6, 1.75));
  EXPECT_EQ(d.height, 2);
  EXPECT_EQ(d.width, 3);
  for (double v : d.values) EXPECT_EQ(v, 1.75);
}

TEST(Downsample, BlockMean) {
  AlignmentMap m(1, 2, 2);
  m.values = {1, 2, 3, 4};
  EXPECT_EQ(downsample2x(m).values, std::vector<double>{2.5});
}

TEST(Downsample, ZerosAndOddDims) {
  for (double v : downsample2x(AlignmentMap(1, 4, 4)).values) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(downsample2x(AlignmentMap(1, 3, 4)), DimensionError);
  EXPECT_THROW(downsample2x(AlignmentMap(1, 4, 5)), DimensionError);
}

TEST(Upsample, ReplicatesCells) {
  AlignmentMap m(1, 1, 1, -2.5);
  const auto u = upsample2x(m);
  EXPECT_EQ(u.height, 2);
  EXPECT_EQ(u.width, 2);
  EXPECT_EQ(u.values, std::vector<double>(4, -2.5));
  for (double v : upsample2x(AlignmentMap(3, 2, 3, 4.0)).values) EXPECT_EQ(v, 4.0);
}

TEST(Upsample, DownAfterUpIsIdentity) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_map(rng, 1 + rng() % 3, 1 + rng() % 5, 1 + rng() % 5);
    EXPECT_EQ(downsample2x(upsample2x(m)).values, m.values);
  }
}

TEST(Adjoints, MatchInnerProductIdentity) {
  std::mt19937_64 rng(4);
  const auto x = random_map(rng, 2, 3, 4);
  const auto y = random_map(rng, 2, 6, 8);
  // <Up x, y> == <x, Up^T y> and <Down y, x> == <y, Down^T x>.
  auto dot = [](const AlignmentMap& a, const AlignmentMap& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) acc += a.values[i] * b.values[i];
    return acc;
  };
  EXPECT_NEAR(dot(upsample2x(x), y), dot(x, upsample2x_adjoint(y)), 1e-12);
  EXPECT_NEAR(dot(downsample2x(y), x), dot(y, downsample2x_adjoint(x)), 1e-12);
}

TEST(FuseDown, Constants) {
  const auto m = fuse_down(constant_pyramid(2, 2, 3, 1.0, 3.0, -4.0));
  EXPECT_EQ(m.height, 2);
  EXPECT_EQ(m.width, 3);
  for (double v : m.values) EXPECT_DOUBLE_EQ(v, ((1.0 + 3.0) / 2.0 + -4.0) / 2.0);
  for (double v : fuse_down(constant_pyramid(1, 1, 1, 0, 0, 0)).values) EXPECT_EQ(v, 0.0);
}

TEST(FuseUp, Constants) {
  const auto m = fuse_up(constant_pyramid(2, 2, 3, 1.0, 3.0, -4.0));
  EXPECT_EQ(m.height, 8);
  EXPECT_EQ(m.width, 12);
  for (double v : m.values) EXPECT_DOUBLE_EQ(v, ((-4.0 + 3.0) / 2.0 + 1.0) / 2.0);
  for (double v : fuse_up(constant_pyramid(1, 1, 1, 0, 0, 0)).values) EXPECT_EQ(v, 0.0);
}

TEST(Fusion, RandomPyramidsMatchCellOracle) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const auto pyr = random_pyramid(rng, 1 + rng() % 3, 1 + rng() % 4, 1 + rng() % 4);
    const auto dw = fuse_down(pyr);
    const auto up = fuse_up(pyr);
    for (int p = 0; p < pyr.p3.prompts; ++p) {
      const auto ref_dw = oracle::fuse_down(grid_of(pyr.p3, p), grid_of(pyr.p4, p), grid_of(pyr.p5, p));
      const auto ref_up = oracle::fuse_up(grid_of(pyr.p3, p), grid_of(pyr.p4, p), grid_of(pyr.p5, p));
      for (std::size_t i = 0; i < ref_dw.v.size(); ++i) EXPECT_NEAR(dw.slice(p)[i], ref_dw.v[i], 1e-13);
      for (std::size_t i = 0; i < ref_up.v.size(); ++i) EXPECT_NEAR(up.slice(p)[i], ref_up.v[i], 1e-13);
    }
  }
}

TEST(Fusion, ShapeViolationsRejected) {
  ScalePyramid bad{AlignmentMap(1, 8, 8), AlignmentMap(1, 4, 4), AlignmentMap(1, 3, 2)};
  EXPECT_THROW(fuse_down(bad), DimensionError);
  EXPECT_THROW(fuse_up(bad), DimensionError);
  ScalePyramid prompts{AlignmentMap(2, 8, 8), AlignmentMap(1, 4, 4), AlignmentMap(1, 2, 2)};
  EXPECT_THROW(fuse_up(prompts), DimensionError);
}

TEST(FusionProperties, Linearity) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int P = 1 + rng() % 3, H5 = 1 + rng() % 3, W5 = 1 + rng() % 3;
    const auto p = random_pyramid(rng, P, H5, W5);
    const auto q = random_pyramid(rng, P, H5, W5);
    const double alpha = std::uniform_real_distribution<double>(-3, 3)(rng);
    ScalePyramid mix = q;
    for (std::size_t i = 0; i < mix.p3.values.size(); ++i) mix.p3.values[i] += alpha * p.p3.values[i];
    for (std::size_t i = 0; i < mix.p4.values.size(); ++i) mix.p4.values[i] += alpha * p.p4.values[i];
    for (std::size_t i = 0; i < mix.p5.values.size(); ++i) mix.p5.values[i] += alpha * p.p5.values[i];
    for (auto fuse : {&fuse_down, &fuse_up}) {
      const auto lhs = fuse(mix);
      const auto fp = fuse(p);
      const auto fq = fuse(q);
      for (std::size_t i = 0; i < lhs.values.size(); ++i)
        EXPECT_NEAR(lhs.values[i], alpha * fp.values[i] + fq.values[i], 1e-10);
    }
  }
}

TEST(FusionProperties, EqualConstantsPreserved) {
  for (double a : {-3.25, 0.0, 7.5}) {
    const auto pyr = constant_pyramid(2, 2, 2, a, a, a);
    for (double v : fuse_down(pyr).values) EXPECT_EQ(v, a);
    for (double v : fuse_up(pyr).values) EXPECT_EQ(v, a);
  }
}
