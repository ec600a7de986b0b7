#pragma once

// Random nuisance/risk configurations expressed both as library parameters
// and as oracle laws.

#include <random>

#include "emcurve/model.hpp"
#include "emcurve/nuisance.hpp"
#include "integration_oracle.hpp"

namespace cases {

inline constexpr int kLevels = 4;

struct Case {
  emcurve::NuisanceParams nuisance;
  emcurve::RiskParams beta;
  int x = 1;
  int z = 1;
  oracle::Laws laws;  // at level x
  oracle::Beta obeta;
};

inline Case random_case(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Case k;
  const double c = 1.0;
  Eigen::VectorXd bcoef(kLevels), scoef(kLevels + 1);
  bcoef << 1.0 + 0.8 * u(rng), 1.2 * u(rng) - 0.3, 1.2 * u(rng) - 0.3, 0.8 * u(rng) - 0.4;
  scoef << 1.0 + u(rng), 0.2 + 0.7 * u(rng), 0.4 * u(rng) - 0.2, 0.4 * u(rng) - 0.2, 0.6 * u(rng) - 0.1;
  k.nuisance.b_given_x = {bcoef, 0.5 + 0.6 * u(rng), c};
  k.nuisance.s_given_b = {scoef, 0.25 + 0.35 * u(rng), c};
  k.beta = {-1.2 + u(rng),        0.4 * u(rng) - 0.2, -0.6 * u(rng), -0.4 * u(rng),
            -0.6 * u(rng) + 0.1,  0.3 * u(rng) - 0.15, {0.4 * u(rng) - 0.2, 0.4 * u(rng) - 0.2, 0.4 * u(rng) - 0.2}};
  k.x = 1 + static_cast<int>(u(rng) * kLevels) % kLevels;
  k.z = u(rng) < 0.5 ? 0 : 1;
  const int x = k.x;
  k.laws.mu_b = bcoef[0] + (x > 1 ? bcoef[x - 1] : 0.0);
  k.laws.sd_b = k.nuisance.b_given_x.sigma;
  k.laws.alpha = scoef[0] + (x > 1 ? scoef[x] : 0.0);
  k.laws.gamma = scoef[1];
  k.laws.sd_s = k.nuisance.s_given_b.sigma;
  k.laws.c = c;
  const auto& b = k.beta;
  k.obeta = {b.beta0, b.beta1, b.beta2, b.beta3, b.beta4, b.beta5, x > 1 ? b.beta6[static_cast<std::size_t>(x - 2)] : 0.0};
  return k;
}

/// An observed marker value: at the limit with probability `at_limit`, else
/// uniform on (c, c + spread).
inline double marker(std::mt19937_64& rng, double at_limit, double spread) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng) < at_limit ? 1.0 : 1.0 + spread * u(rng);
}

}  // namespace cases
