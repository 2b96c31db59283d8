#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "expalign/geo_loss.hpp"
#include "expalign/gradients.hpp"
#include "expalign/variational.hpp"
#include "oracles.hpp"

using namespace expalign;

namespace {

GibbsProblem random_problem(std::mt19937_64& rng, std::size_t n) {
  GibbsProblem p;
  p.energy = oracle::random_vector(rng, n, -3, 3);
  p.geometry = oracle::random_vector(rng, n, -3, 3);
  for (double& a : p.geometry)
    if (rng() % 3 == 0) a = 0.0;
  p.temperature = 0.2 + 2.0 * std::uniform_real_distribution<double>()(rng);
  p.geometry_weight = std::uniform_real_distribution<double>(0, 2)(rng);
  return p;
}

double sup(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(FreeEnergy, UniformHasNoKlTerm) {
  GibbsProblem p{{1.0, 2.0, 6.0}, {0.0, 3.0, 0.0}, 0.7, 0.5};
  EXPECT_NEAR(free_energy(SimplexDistribution::uniform(3), p), 3.0 - 0.5 * 1.0, 1e-15);
}

TEST(FreeEnergy, FlatProblemIsScaledKl) {
  GibbsProblem p{{0.0, 0.0}, {}, 2.0, 0.0};
  const SimplexDistribution q{{0.8, 0.2}};
  EXPECT_NEAR(free_energy(q, p), 2.0 * kl_divergence(q, SimplexDistribution::uniform(2)), 1e-15);
  EXPECT_GT(free_energy(q, p), 0.0);
  EXPECT_EQ(free_energy(SimplexDistribution::uniform(2), p), 0.0);
}

TEST(FreeEnergy, TwoPointExample) {
  GibbsProblem p{{0.0, 1.0}, {}, 1.0, 0.0};
  const SimplexDistribution q{{0.8, 0.2}};
  // 0.2 + 0.8 log 1.6 + 0.2 log 0.4
  EXPECT_NEAR(free_energy(q, p), 0.2 + 0.8 * std::log(1.6) + 0.2 * std::log(0.4), 1e-15);
  EXPECT_NEAR(free_energy(q, p), 0.392745, 1e-6);
}

TEST(FreeEnergy, ZeroMassUsesZeroLogZero) {
  GibbsProblem p{{0.0, 1.0}, {}, 1.0, 0.0};
  EXPECT_NEAR(free_energy(SimplexDistribution{{1.0, 0.0}}, p), std::log(2.0), 1e-15);
}

TEST(FreeEnergy, OffSimplexIsDomainError) {
  GibbsProblem p{{0.0, 1.0}, {}, 1.0, 0.0};
  EXPECT_THROW(free_energy(SimplexDistribution{{0.6, 0.6}}, p), DomainError);
  EXPECT_THROW(free_energy(SimplexDistribution{{1.1, -0.1}}, p), DomainError);
  EXPECT_NO_THROW(free_energy(SimplexDistribution{{0.5 + 1e-10, 0.5}}, p));
  EXPECT_THROW(free_energy(SimplexDistribution{{1.0}}, p), DimensionError);
}

TEST(GibbsClosedForm, Examples) {
  const auto flat = gibbs_closed_form({{4.0, 4.0, 4.0, 4.0}, {}, 0.3, 0.0});
  for (double v : flat.mass) EXPECT_NEAR(v, 0.25, 1e-15);
  const auto q = gibbs_closed_form({{0.0, std::log(2.0)}, {}, 1.0, 0.0});
  EXPECT_NEAR(q.mass[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(q.mass[1], 1.0 / 3.0, 1e-15);
}

TEST(GibbsClosedForm, GeometryRaisesItsIndex) {
  GibbsProblem p{{0.5, 0.1, 0.9}, {0.0, 0.0, 1.0}, 1.0, 0.0};
  const double before = gibbs_closed_form(p).mass[2];
  p.geometry_weight = 0.4;
  EXPECT_GT(gibbs_closed_form(p).mass[2], before);
}

TEST(GibbsClosedForm, RejectsBadProblems) {
  EXPECT_THROW(gibbs_closed_form({{}, {}, 1.0, 0.0}), DomainError);
  EXPECT_THROW(gibbs_closed_form({{1.0}, {}, 0.0, 0.0}), DomainError);
  EXPECT_THROW(gibbs_closed_form({{1.0, 2.0}, {1.0}, 1.0, 0.0}), DimensionError);
  EXPECT_THROW(gibbs_closed_form({{1.0, NAN}, {}, 1.0, 0.0}), DomainError);
}

TEST(NumericMinimizer, FlatEnergyStopsAtUniform) {
  const auto r = minimize_free_energy_numeric({{2.0, 2.0, 2.0}, {}, 1.0, 0.0});
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 1);
  for (double v : r.distribution.mass) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(NumericMinimizer, AgreesWithClosedForm) {
  std::mt19937_64 rng(83);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_problem(rng, 10);
    const auto num = minimize_free_energy_numeric(p);
    const auto closed = gibbs_closed_form(p);
    EXPECT_TRUE(num.converged);
    EXPECT_LE(kl_divergence(num.distribution, closed), 1e-8);
    EXPECT_GE(free_energy(num.distribution, p), free_energy(closed, p) - 1e-10);
  }
}

TEST(NumericMinimizer, ReportsNonConvergence) {
  const auto r = minimize_free_energy_numeric({{0.0, 5.0, -3.0}, {}, 1.0, 0.0}, 2);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2);
  EXPECT_GT(r.residual, 0.0);
}

TEST(Dirichlet, SamplesLieOnSimplex) {
  std::mt19937_64 rng(89);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = sample_dirichlet(1 + rng() % 30, rng);
    EXPECT_NO_THROW(check_simplex(q, 1e-12));
    for (double v : q.mass) EXPECT_GT(v, 0.0);
  }
}

// Property sweeps.

TEST(VariationalProperties, ClosedFormIsOptimal) {
  std::mt19937_64 rng(97);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_problem(rng, 2 + rng() % 40);
    const auto star = gibbs_closed_form(p);
    const double f_star = free_energy(star, p);
    for (int i = 0; i < 1000; ++i)
      EXPECT_GE(free_energy(sample_dirichlet(p.size(), rng), p), f_star - 1e-12);
  }
}

TEST(VariationalProperties, ShiftAndTemperatureInvariance) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_problem(rng, 1 + rng() % 64);
    p.temperature = 1.0;
    const auto base = gibbs_closed_form(p);
    auto shifted = p;
    for (double& e : shifted.energy) e += 12.5;
    EXPECT_LE(sup(gibbs_closed_form(shifted).mass, base.mass), 1e-12);

    const double a = 0.05 + 5.0 * std::uniform_real_distribution<double>()(rng);
    auto scaled = p;
    for (double& e : scaled.energy) e *= a;
    for (double& g : scaled.geometry) g *= a;
    scaled.temperature = a;
    EXPECT_LE(sup(gibbs_closed_form(scaled).mass, base.mass), 1e-12);
  }
}

TEST(VariationalProperties, TemperatureLimits) {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_problem(rng, 2 + rng() % 63);
    p.temperature = 1e8;
    const auto hot = gibbs_closed_form(p);
    EXPECT_LE(sup(hot.mass, SimplexDistribution::uniform(p.size()).mass), 1e-6);

    p.temperature = 1e-6;
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (p.effective_energy(i) < p.effective_energy(best)) best = i;
    EXPECT_GE(gibbs_closed_form(p).mass[best], 1.0 - 1e-6);
  }
}

TEST(VariationalProperties, ZeroGeometryWeightIsPlainGibbs) {
  std::mt19937_64 rng(107);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_problem(rng, 20);
    p.geometry_weight = 0.0;
    GibbsProblem plain{p.energy, {}, p.temperature, 0.0};
    EXPECT_EQ(gibbs_closed_form(p).mass, gibbs_closed_form(plain).mass);
    p.geometry_weight = 1e-9;
    EXPECT_LE(sup(gibbs_closed_form(p).mass, gibbs_closed_form(plain).mass), 1e-8);
  }
}

TEST(VariationalProperties, MatchesJointSoftmaxOfShiftedScores) {
  // E = -S, tau = 1: the Gibbs solution is the joint softmax of S + lambda A.
  std::mt19937_64 rng(109);
  for (int trial = 0; trial < 50; ++trial) {
    const int P = 1 + rng() % 3, H = 2 + rng() % 4, W = 2 + rng() % 4;
    AlignmentMap s(P, H, W);
    s.values = oracle::random_vector(rng, s.values.size(), -4, 4);
    AlignmentMap a(P, H, W);
    a.values = oracle::random_vector(rng, a.values.size(), -3, 3);
    const double lambda = 0.8;
    GibbsProblem p{{}, a.values, 1.0, lambda};
    for (double v : s.values) p.energy.push_back(-v);
    auto shifted = s;
    for (std::size_t i = 0; i < s.values.size(); ++i) shifted.values[i] += lambda * a.values[i];
    EXPECT_LE(sup(gibbs_closed_form(p).mass, joint_softmax(shifted).probabilities), 1e-12);
  }
}

TEST(VariationalProperties, CrossEntropyToGibbsTargetForNonnegativeWeights) {
  // With w = A >= 0 on masked pairs, -sum w log P is minimized over
  // distributions P by P proportional to w; as a check the advantage-weighted
  // loss at the Gibbs posterior of a target equals its cross-entropy form.
  std::mt19937_64 rng(113);
  for (int trial = 0; trial < 50; ++trial) {
    const int P = 1 + rng() % 2, H = 2, W = 3;
    AlignmentMap z(P, H, W);
    z.values = oracle::random_vector(rng, z.values.size(), -2, 2);
    InstanceMaskSet masks(P, H, W);
    AlignmentMap a(P, H, W);
    double wsum = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i)
      if (rng() % 2 == 0) {
        masks.values[i] = 1;
        a.values[i] = 3.0 * std::uniform_real_distribution<double>()(rng);
        wsum += a.values[i];
      }
    if (masks.total_positive() == 0) continue;
    const auto d = joint_softmax(z);
    double ce = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i)
      if (masks.values[i]) ce -= a.values[i] * std::log(d.probabilities[i]);
    EXPECT_NEAR(gaco_loss(d, a, masks), ce / static_cast<double>(masks.total_positive()), 1e-12);
    // The loss is no smaller at z than at the target distribution w / sum w.
    if (wsum > 0.0) {
      PairDistribution target{P, H, W, std::vector<double>(a.values.size(), 0.0)};
      for (std::size_t i = 0; i < a.values.size(); ++i)
        target.probabilities[i] = masks.values[i] ? a.values[i] / wsum : 0.0;
      EXPECT_GE(gaco_loss(d, a, masks), gaco_loss(target, a, masks) - 1e-12);
    }
  }
}

TEST(VariationalProperties, GradientMatchesFiniteDifferencesOnTangentSpace) {
  std::mt19937_64 rng(127);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_problem(rng, 2 + rng() % 10);
    auto q = sample_dirichlet(p.size(), rng);
    // Keep away from the boundary so that +-h stays inside the simplex.
    for (double& v : q.mass) v = 0.5 * v + 0.5 / static_cast<double>(p.size());
    const auto g = free_energy_gradient(q, p);
    // Directional derivative along e_i - e_j, which preserves total mass.
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
      const std::size_t j = i + 1;
      auto f = [&](std::span<const double> x) {
        SimplexDistribution d = q;
        d.mass[i] += x[0];
        d.mass[j] -= x[0];
        return free_energy(d, p);
      };
      const double zero[] = {0.0};
      const double fd = finite_difference_gradient(f, zero, 1e-5)[0];
      EXPECT_NEAR(fd, g[i] - g[j], 1e-6);
    }
  }
}
