#include "emcurve/curves.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "emcurve/errors.hpp"

namespace emcurve {

std::string curve_kind_name(CurveKind kind) {
  switch (kind) {
    case CurveKind::Marginal:
      return "marginal";
    case CurveKind::Seropositive:
      return "seropositive";
    case CurveKind::Seronegative:
      return "seronegative";
    case CurveKind::Difference:
      return "difference";
  }
  return "unknown";
}

double risk_given_x(const RiskParams& beta, const MixedConditional& mc, int z, int x, Stratum stratum) {
  const double c = mc.limit;
  const double s = mc.s;
  const double w0 = mc.point_mass;
  switch (stratum) {
    case Stratum::Seronegative:
      if (w0 < kEmptyStratumMass) {
        throw EmptyStratumError(fmt::format("P(B = c | s={}, x={}) = {:.3g} leaves the seronegative stratum empty", s,
                                            x, w0));
      }
      return risk(beta, z, s, c, x);
    case Stratum::Seropositive: {
      const double mass = mc.continuous_mass();
      if (mass < kEmptyStratumMass) {
        throw EmptyStratumError(fmt::format("P(B > c | s={}, x={}) = {:.3g} leaves the seropositive stratum empty", s,
                                            x, mass));
      }
      double acc = 0.0;
      for (const auto& a : mc.continuous) acc += a.weight * risk(beta, z, s, a.value, x);
      return acc / mass;
    }
    case Stratum::Marginal: {
      double acc = w0 * risk(beta, z, s, c, x);
      for (const auto& a : mc.continuous) acc += a.weight * risk(beta, z, s, a.value, x);
      return acc;
    }
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double risk_given_x(const RiskParams& beta, const NuisanceParams& nu, const Quadrature& quad, int z, double s, int x,
                    Stratum stratum) {
  const MixedConditional mc = invert_to_b_given_s(nu.b_given_x, nu.s_given_b, s, x, quad);
  return risk_given_x(beta, mc, z, x, stratum);
}

CurveGrid::CurveGrid(std::vector<double> points, DetectionLimit limit) : points_(std::move(points)) {
  if (points_.empty()) throw ValidationError("curve grid is empty");
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (!std::isfinite(points_[i]) || points_[i] < limit.c) {
      throw ValidationError(fmt::format("grid point {} = {} is below the detection limit {}", i + 1, points_[i], limit.c));
    }
    if (i > 0 && !(points_[i] > points_[i - 1])) throw ValidationError("curve grid must be strictly increasing");
  }
}

CurveGrid CurveGrid::linspace(double lo, double hi, std::size_t n, DetectionLimit limit) {
  if (n == 0) throw ValidationError("grid size must be positive");
  std::vector<double> pts(n);
  if (n == 1) {
    pts[0] = lo;
  } else {
    for (std::size_t i = 0; i < n; ++i) pts[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    pts[n - 1] = hi;
  }
  return CurveGrid(std::move(pts), limit);
}

double sample_quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

CurveGrid default_grid(const Dataset& data) {
  std::vector<double> s;
  for (const auto& o : data.rows) {
    if (o.z == 1 && o.delta()) s.push_back(*o.s);
  }
  std::sort(s.begin(), s.end());
  if (s.size() < 2 || s.front() == s.back()) {
    throw DesignError("default grid needs at least two distinct observed S values in the vaccine arm");
  }
  const double lo = sample_quantile(s, 0.025);
  const double hi = sample_quantile(s, 0.975);
  if (!(hi > lo)) throw DesignError("observed S has no spread between its 2.5th and 97.5th percentiles");
  return CurveGrid::linspace(lo, hi, kDefaultGridSize, data.limit);
}

const MultinomialModel& CovariateModels::for_stratum(Stratum s) const {
  switch (s) {
    case Stratum::Seropositive:
      return seropositive;
    case Stratum::Seronegative:
      return seronegative;
    case Stratum::Marginal:
      break;
  }
  return marginal;
}

namespace {

CurvePoint mix_point(const RiskParams& beta, const std::vector<MixedConditional>& per_x, const MultinomialModel& px,
                     Stratum stratum, Contrast h, std::vector<double>& probs) {
  probs.resize(per_x.size());
  px.probabilities(per_x.front().s, probs);
  CurvePoint pt;
  for (std::size_t j = 0; j < per_x.size(); ++j) {
    if (probs[j] == 0.0) continue;
    const int x = static_cast<int>(j) + 1;
    pt.risk1 += probs[j] * risk_given_x(beta, per_x[j], 1, x, stratum);
    pt.risk0 += probs[j] * risk_given_x(beta, per_x[j], 0, x, stratum);
  }
  pt.value = h(pt.risk1, pt.risk0);
  return pt;
}

std::vector<MixedConditional> invert_all(const NuisanceParams& nu, const Quadrature& quad, double s, int levels) {
  std::vector<MixedConditional> out;
  out.reserve(static_cast<std::size_t>(levels));
  for (int x = 1; x <= levels; ++x) out.push_back(invert_to_b_given_s(nu.b_given_x, nu.s_given_b, s, x, quad));
  return out;
}

}  // namespace

std::vector<CurvePoint> mcep_curve(const RiskParams& beta, const NuisanceParams& nu, const CovariateModels& cov,
                                   const CurveGrid& grid, Stratum stratum, Contrast h, const Quadrature& quad) {
  std::vector<CurvePoint> out;
  out.reserve(grid.size());
  std::vector<double> probs;
  for (double s : grid.points()) {
    out.push_back(mix_point(beta, invert_all(nu, quad, s, beta.levels()), cov.for_stratum(stratum), stratum, h, probs));
  }
  return out;
}

std::vector<double> CurveSet::values(CurveKind k) const {
  std::vector<double> v;
  for (const auto& p : (*this)[k]) v.push_back(p.value);
  return v;
}

CurveSet evaluate_curves(const RiskParams& beta, const NuisanceParams& nu, const CovariateModels& cov,
                         const CurveGrid& grid, Contrast h, const Quadrature& quad) {
  CurveSet set;
  std::vector<double> probs;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (double s : grid.points()) {
    const auto per_x = invert_all(nu, quad, s, beta.levels());
    const CurvePoint m = mix_point(beta, per_x, cov.marginal, Stratum::Marginal, h, probs);
    const CurvePoint pos = mix_point(beta, per_x, cov.seropositive, Stratum::Seropositive, h, probs);
    const CurvePoint neg = mix_point(beta, per_x, cov.seronegative, Stratum::Seronegative, h, probs);
    set[CurveKind::Marginal].push_back(m);
    set[CurveKind::Seropositive].push_back(pos);
    set[CurveKind::Seronegative].push_back(neg);
    set[CurveKind::Difference].push_back({nan, nan, pos.value - neg.value});
  }
  return set;
}

}  // namespace emcurve
