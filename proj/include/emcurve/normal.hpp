#pragma once

// Standard normal density, distribution and quantile functions with stable
// logarithms for the far tails.

namespace emcurve {

inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934;
inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736406;

double normal_pdf(double x);
double normal_log_pdf(double x);
double normal_cdf(double x);
/// Upper tail 1 - Phi(x), accurate when Phi(x) is close to one.
double normal_sf(double x);
/// log Phi(x); finite for every finite x.
double normal_log_cdf(double x);
/// phi(x)/Phi(x), the inverse Mills ratio of the lower tail.
double normal_mills(double x);
double normal_quantile(double p);

}  // namespace emcurve
