#pragma once

// Free-energy functional over the prompt-patch simplex,
//   F[Q] = E_Q[E] - lambda * E_Q[A] + tau * KL(Q || U),
// its closed-form Gibbs minimizer, and a mirror-descent minimizer used as an
// independent numeric check of the closed form.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "expalign/numeric.hpp"
#include "expalign/tensor.hpp"

namespace expalign {

struct GibbsProblem {
  std::vector<double> energy;
  std::vector<double> geometry;  // zero outside masks; may be empty (treated as 0)
  double temperature = 1.0;
  double geometry_weight = 0.0;

  std::size_t size() const { return energy.size(); }

  double effective_energy(std::size_t i) const {
    const double a = geometry.empty() ? 0.0 : geometry[i];
    return energy[i] - geometry_weight * a;
  }
};

struct SimplexDistribution {
  std::vector<double> mass;

  static SimplexDistribution uniform(std::size_t n) {
    return {std::vector<double>(n, 1.0 / static_cast<double>(n))};
  }
};

inline constexpr double kLogFloor = 1e-300;

inline void check_problem(const GibbsProblem& prob) {
  detail::require_domain(prob.size() > 0, "GibbsProblem: empty pair set");
  detail::require_domain(prob.temperature > 0.0, "GibbsProblem: temperature must be > 0");
  detail::require_dims(prob.geometry.empty() || prob.geometry.size() == prob.size(),
                       "GibbsProblem: geometry score length mismatch");
  detail::require_domain(detail::all_finite<double>(prob.energy) &&
                             detail::all_finite<double>(prob.geometry),
                         "GibbsProblem: non-finite energy or geometry score");
}

inline void check_simplex(const SimplexDistribution& q, double tol = 1e-9) {
  double total = 0.0;
  for (double v : q.mass) {
    detail::require_domain(v >= -tol, "simplex: negative mass");
    total += v;
  }
  detail::require_domain(std::abs(total - 1.0) <= tol,
                         "simplex: total mass " + std::to_string(total) + " != 1");
}

/// KL(q || r) with 0 log 0 = 0.
inline double kl_divergence(const SimplexDistribution& q, const SimplexDistribution& r) {
  detail::require_dims(q.mass.size() == r.mass.size(), "kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.mass.size(); ++i) {
    if (q.mass[i] <= 0.0) continue;
    kl += q.mass[i] * (std::log(std::max(q.mass[i], kLogFloor)) -
                       std::log(std::max(r.mass[i], kLogFloor)));
  }
  return kl;
}

inline double free_energy(const SimplexDistribution& q, const GibbsProblem& prob) {
  check_problem(prob);
  detail::require_dims(q.mass.size() == prob.size(), "free_energy: size mismatch");
  check_simplex(q);
  const double n = static_cast<double>(prob.size());
  double linear = 0.0;
  double kl = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    linear += q.mass[i] * prob.effective_energy(i);
    if (q.mass[i] > 0.0) kl += q.mass[i] * (std::log(std::max(q.mass[i], kLogFloor)) + std::log(n));
  }
  return linear + prob.temperature * kl;
}

/// dF/dQ(i) = E(i) - lambda A(i) + tau (log(Q(i) / U(i)) + 1).
inline std::vector<double> free_energy_gradient(const SimplexDistribution& q,
                                                const GibbsProblem& prob) {
  const double n = static_cast<double>(prob.size());
  std::vector<double> g(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i)
    g[i] = prob.effective_energy(i) +
           prob.temperature * (std::log(std::max(q.mass[i], kLogFloor)) + std::log(n) + 1.0);
  return g;
}

/// Q*(i) proportional to exp(-(E(i) - lambda A(i)) / tau).
inline SimplexDistribution gibbs_closed_form(const GibbsProblem& prob) {
  check_problem(prob);
  std::vector<double> logits(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) logits[i] = -prob.effective_energy(i);
  return {softmax<double>(logits, prob.temperature)};
}

struct NumericMinimum {
  SimplexDistribution distribution;
  int iterations = 0;
  double residual = 0.0;  // max-norm change of the last accepted step
  bool converged = false;
};

/// Exponentiated-gradient descent from the uniform distribution:
///   Q <- normalize(Q * exp(-eta * dF/dQ)),  eta = step_scale / tau,
/// carried out in the log domain. The step is halved whenever F increases.
inline NumericMinimum minimize_free_energy_numeric(const GibbsProblem& prob,
                                                   int max_iters = 10000, double tol = 1e-14,
                                                   double step_scale = 0.5) {
  check_problem(prob);
  detail::require_domain(step_scale > 0.0 && step_scale <= 1.0,
                         "minimize_free_energy_numeric: step scale must lie in (0, 1]");
  const std::size_t n = prob.size();
  std::vector<double> log_q(n, -std::log(static_cast<double>(n)));
  SimplexDistribution q = SimplexDistribution::uniform(n);
  double f = free_energy(q, prob);
  double eta = step_scale / prob.temperature;

  NumericMinimum out;
  std::vector<double> trial_log(n);
  for (int it = 1; it <= max_iters; ++it) {
    out.iterations = it;
    // In the log domain the KL part of the gradient is tau * log Q + const.
    for (std::size_t i = 0; i < n; ++i)
      trial_log[i] = log_q[i] - eta * (prob.effective_energy(i) + prob.temperature * log_q[i]);
    const double lse = log_sum_exp<double>(trial_log);
    for (double& v : trial_log) v -= lse;
    SimplexDistribution trial;
    trial.mass.resize(n);
    for (std::size_t i = 0; i < n; ++i) trial.mass[i] = std::exp(trial_log[i]);
    const double f_trial = free_energy(trial, prob);
    if (f_trial > f + 1e-15 * std::max(1.0, std::abs(f)) && eta > 1e-12 / prob.temperature) {
      eta *= 0.5;
      continue;
    }
    const double change = sup_distance<double>(trial.mass, q.mass);
    log_q.swap(trial_log);
    q = std::move(trial);
    f = f_trial;
    out.residual = change;
    if (change <= tol) {
      out.converged = true;
      break;
    }
  }
  out.distribution = std::move(q);
  return out;
}

/// Symmetric Dirichlet(1) sample: normalized standard exponentials.
template <std::uniform_random_bit_generator Rng>
SimplexDistribution sample_dirichlet(std::size_t n, Rng& rng) {
  SimplexDistribution q;
  q.mass.resize(n);
  double total = 0.0;
  for (auto& v : q.mass) {
    double u = 0.0;
    while (u <= 0.0) u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = -std::log(u);
    total += v;
  }
  for (auto& v : q.mass) v /= total;
  return q;
}

}  // namespace expalign
