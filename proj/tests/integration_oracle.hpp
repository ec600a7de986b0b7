#pragma once

// Monte Carlo integration of the missing-marker laws, written from the model
// definitions: B* ~ N(mu_b(x), sd_b^2), S* | B* ~ N(alpha(x) + gamma B*, sd_s^2),
// observed markers max(latent, c). Variance is reduced by stratifying each
// uniform coordinate; the B | S law is reached by self-normalised importance
// sampling from the prior of B*.

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"

namespace oracle {

struct Laws {
  double mu_b = 1.4;   // E B* | x
  double sd_b = 0.86;
  double alpha = 1.5;  // intercept of S* | B*, x
  double gamma = 0.5;
  double sd_s = 0.4;
  double c = 1.0;
};

struct Beta {
  double b0, b1, b2, b3, b4, b5, bx;  // bx: coefficient of the subject's x level (0 for level 1)
  double eta(int z, double s, double b) const { return b0 + b1 * z + (b2 + b3 * z) * s + (b4 + b5 * z) * b + bx; }
};

inline double outcome_prob(const Beta& beta, int z, int y, double s, double b) {
  const double p = Phi(beta.eta(z, s, b));
  return y == 1 ? p : 1.0 - p;
}

/// P(Y = y | B = b, X) with S unobserved.
inline double prob_given_b(const Laws& L, const Beta& beta, int z, int y, double b, std::size_t m,
                           std::mt19937_64& rng) {
  if (b > L.c) {
    const double mean = L.alpha + L.gamma * b;
    return expect_1d(m * m, rng, [&](double u) {
      return outcome_prob(beta, z, y, std::max(mean + L.sd_s * u, L.c), b);
    });
  }
  // B* is spread over (-inf, c): map the first coordinate through the truncated inverse CDF.
  const double pc = Phi((L.c - L.mu_b) / L.sd_b);
  return expect_2d(m, rng, [&](double u1, double u2) {
    const double bl = L.mu_b + L.sd_b * Phi_inv(std::max(Phi(u1) * pc, 1e-300));
    const double s = std::max(L.alpha + L.gamma * bl + L.sd_s * u2, L.c);
    return outcome_prob(beta, z, y, s, L.c);
  });
}

/// Importance weight of a latent B* for an observed S = s.
inline double s_likelihood(const Laws& L, double s, double b_latent) {
  const double r = (s - L.alpha - L.gamma * b_latent) / L.sd_s;
  return s > L.c ? phi(r) : Phi(r);
}

enum class Part { All, Above, Below };

/// E[g(max(B*, c)) 1{part} | S = s] / P(part | S = s) by SNIS over n prior draws.
template <class G>
double expect_b_given_s(const Laws& L, double s, Part part, std::size_t n, std::mt19937_64& rng, G g) {
  double num = 0.0, den = 0.0;
  for (double u : stratified_normal(n, rng)) {
    const double bl = L.mu_b + L.sd_b * u;
    const bool above = bl > L.c;
    if ((part == Part::Above && !above) || (part == Part::Below && above)) continue;
    const double w = s_likelihood(L, s, bl);
    num += w * g(std::max(bl, L.c));
    den += w;
  }
  return num / den;
}

/// P(Y = y | S = s, X) with B unobserved.
inline double prob_given_s(const Laws& L, const Beta& beta, int z, int y, double s, std::size_t n,
                           std::mt19937_64& rng) {
  return expect_b_given_s(L, s, Part::All, n, rng, [&](double b) { return outcome_prob(beta, z, y, s, b); });
}

/// P(Y = y | X) with both markers unobserved.
inline double prob_given_x(const Laws& L, const Beta& beta, int z, int y, std::size_t m, std::mt19937_64& rng) {
  return expect_2d(m, rng, [&](double u1, double u2) {
    const double bl = L.mu_b + L.sd_b * u1;
    const double s = std::max(L.alpha + L.gamma * bl + L.sd_s * u2, L.c);
    return outcome_prob(beta, z, y, s, std::max(bl, L.c));
  });
}

/// P(Y(z) = 1 | S(1) = s, X, stratum) for the marginal, B > c and B = c strata.
inline double risk_given_s(const Laws& L, const Beta& beta, int z, double s, Part part, std::size_t n,
                           std::mt19937_64& rng) {
  return expect_b_given_s(L, s, part, n, rng, [&](double b) { return Phi(beta.eta(z, s, b)); });
}

}  // namespace oracle
