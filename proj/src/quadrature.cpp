#include "emcurve/quadrature.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"

namespace emcurve {

Quadrature::Quadrature(int nodes) {
  if (nodes < 2) throw ValidationError("quadrature needs at least 2 nodes");
  const int n = nodes;
  nodes_.resize(static_cast<std::size_t>(n));
  weights_.resize(static_cast<std::size_t>(n));
  // Newton iteration on the Legendre polynomial from the Chebyshev guess.
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes_[static_cast<std::size_t>(i)] = -x;
    nodes_[static_cast<std::size_t>(n - 1 - i)] = x;
    weights_[static_cast<std::size_t>(i)] = w;
    weights_[static_cast<std::size_t>(n - 1 - i)] = w;
  }
}

double Quadrature::interval_mass(double lo, double hi) {
  if (!(hi > lo)) return 0.0;
  if (hi <= 0.0) return normal_cdf(hi) - normal_cdf(lo);
  if (lo >= 0.0) return normal_sf(lo) - normal_sf(hi);
  return 1.0 - normal_cdf(lo) - normal_sf(hi);
}

void Quadrature::truncated(double mu, double sigma, double lo, double hi, std::vector<QuadAtom>& out) const {
  const double a = (lo - mu) / sigma;
  const double b = (hi - mu) / sigma;
  const double mass = interval_mass(a, b);
  if (!(mass > 0.0)) return;
  const double l = std::max(a, -kTailCut);
  const double u = std::min(b, kTailCut);
  if (!(u > l)) {
    // All of the (tiny) mass lies beyond the cut; place it at the nearest edge.
    out.push_back({mu + sigma * (a > 0.0 ? a : b), mass});
    return;
  }
  const double half = 0.5 * (u - l);
  const double mid = 0.5 * (u + l);
  const std::size_t first = out.size();
  double raw = 0.0;
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    const double t = mid + half * nodes_[k];
    const double w = weights_[k] * half * normal_pdf(t);
    raw += w;
    out.push_back({mu + sigma * t, w});
  }
  if (raw > 0.0) {
    const double scale = mass / raw;
    for (std::size_t k = first; k < out.size(); ++k) out[k].weight *= scale;
  }
}

void Quadrature::censored(double mu, double sigma, double c, std::vector<QuadAtom>& out) const {
  const double a = (c - mu) / sigma;
  const double below = normal_cdf(a);
  if (below > 0.0) out.push_back({c, below});
  truncated(mu, sigma, c, std::numeric_limits<double>::infinity(), out);
}

}  // namespace emcurve
