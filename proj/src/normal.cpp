#include "emcurve/normal.hpp"

#include <cmath>
#include <limits>

#include <boost/math/distributions/normal.hpp>

namespace emcurve {

namespace {
constexpr double kInvSqrt2 = 0.707106781186547524400844362105;
}

double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

double normal_log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

double normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

double normal_sf(double x) { return 0.5 * std::erfc(x * kInvSqrt2); }

double normal_log_cdf(double x) {
  if (x > 0.0) return std::log1p(-normal_sf(x));
  if (x > -30.0) return std::log(normal_cdf(x));
  // Asymptotic series: Phi(x) ~ phi(x)/(-x) * (1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8)
  const double z = 1.0 / (x * x);
  const double series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - 105.0 * z)));
  return normal_log_pdf(x) - std::log(-x) + std::log(series);
}

double normal_mills(double x) {
  if (x > -30.0) return normal_pdf(x) / normal_cdf(x);
  return std::exp(normal_log_pdf(x) - normal_log_cdf(x));
}

double normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

}  // namespace emcurve
