#pragma once

#include <array>
#include <string>
#include <vector>

#include "emcurve/dataset.hpp"
#include "emcurve/model.hpp"
#include "emcurve/nuisance.hpp"
#include "emcurve/quadrature.hpp"

namespace emcurve {

/// Baseline stratum a risk is conditioned on.
enum class Stratum { Marginal, Seropositive, Seronegative };

enum class CurveKind { Marginal = 0, Seropositive = 1, Seronegative = 2, Difference = 3 };
inline constexpr std::array<CurveKind, 4> kAllCurveKinds = {CurveKind::Marginal, CurveKind::Seropositive,
                                                            CurveKind::Seronegative, CurveKind::Difference};
std::string curve_kind_name(CurveKind kind);

inline constexpr double kEmptyStratumMass = 1e-10;

/// risk_z(s, stratum, x) integrated over F^{B|S,X}:
///   marginal      w0 risk(s, c, x) + int_{b>c} risk(s, b, x) dF
///   seropositive  int_{b>c} risk(s, b, x) dF / (1 - w0)
///   seronegative  risk(s, c, x)
/// Throws EmptyStratumError when the conditioning stratum has mass below 1e-10.
double risk_given_x(const RiskParams& beta, const MixedConditional& b_given_s, int z, int x, Stratum stratum);
double risk_given_x(const RiskParams& beta, const NuisanceParams& nuisance, const Quadrature& quad, int z, double s,
                    int x, Stratum stratum);

/// Ascending grid of biomarker values, all at or above the limit.
class CurveGrid {
 public:
  CurveGrid() = default;
  CurveGrid(std::vector<double> points, DetectionLimit limit);

  const std::vector<double>& points() const noexcept { return points_; }
  std::size_t size() const noexcept { return points_.size(); }
  double operator[](std::size_t i) const { return points_[i]; }

  static CurveGrid linspace(double lo, double hi, std::size_t n, DetectionLimit limit);

 private:
  std::vector<double> points_;
};

inline constexpr std::size_t kDefaultGridSize = 51;

/// Type-7 sample quantile of sorted values.
double sample_quantile(const std::vector<double>& sorted, double p);

/// 51 points from the 2.5th to the 97.5th percentile of observed S among
/// vaccine recipients.
CurveGrid default_grid(const Dataset& data);

/// P(X | S), P(X | S, B > c) and P(X | S, B = c).
struct CovariateModels {
  MultinomialModel marginal;
  MultinomialModel seropositive;
  MultinomialModel seronegative;

  const MultinomialModel& for_stratum(Stratum s) const;
};

struct CurvePoint {
  double risk1 = 0.0;
  double risk0 = 0.0;
  double value = 0.0;
};

/// Eqs. (1)-(3): risks mixed over x with P(X | s, stratum), then h(risk1, risk0).
std::vector<CurvePoint> mcep_curve(const RiskParams& beta, const NuisanceParams& nuisance,
                                   const CovariateModels& covariates, const CurveGrid& grid, Stratum stratum,
                                   Contrast h, const Quadrature& quad);

/// The three stratum curves plus seropositive minus seronegative.
struct CurveSet {
  std::array<std::vector<CurvePoint>, 4> curves;

  const std::vector<CurvePoint>& operator[](CurveKind k) const { return curves[static_cast<std::size_t>(k)]; }
  std::vector<CurvePoint>& operator[](CurveKind k) { return curves[static_cast<std::size_t>(k)]; }
  std::vector<double> values(CurveKind k) const;
};

CurveSet evaluate_curves(const RiskParams& beta, const NuisanceParams& nuisance, const CovariateModels& covariates,
                         const CurveGrid& grid, Contrast h, const Quadrature& quad);

}  // namespace emcurve
