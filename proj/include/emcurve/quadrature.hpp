#pragma once

#include <vector>

namespace emcurve {

struct QuadAtom {
  double value = 0.0;
  double weight = 0.0;
};

/// Fixed-node rule for expectations under (censored) normal laws.
///
/// A censored law max(N(mu, sigma^2), c) is represented as a point mass at c
/// with weight Phi((c - mu)/sigma) plus `nodes()` Gauss-Legendre nodes on the
/// latent normal above c. The tail beyond 9 standard deviations is cut from
/// the node range but not from the weights, which are rescaled to the exact
/// interval probability.
class Quadrature {
 public:
  static constexpr double kTailCut = 9.0;

  explicit Quadrature(int nodes = 40);

  int nodes() const noexcept { return static_cast<int>(nodes_.size()); }

  /// Appends atoms of max(N(mu, sigma^2), c); weights sum to one.
  void censored(double mu, double sigma, double c, std::vector<QuadAtom>& out) const;

  /// Appends atoms of N(mu, sigma^2) restricted to (lo, hi); weights sum to
  /// P(lo < X < hi). Infinite bounds are allowed.
  void truncated(double mu, double sigma, double lo, double hi, std::vector<QuadAtom>& out) const;

  /// Probability that N(0,1) lies in (lo, hi), computed on the accurate tail.
  static double interval_mass(double lo, double hi);

 private:
  std::vector<double> nodes_;
  std::vector<double> weights_;
};

}  // namespace emcurve
