#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emcurve/curves.hpp"
#include "emcurve/dataset.hpp"
#include "emcurve/pipeline.hpp"

namespace emcurve {

/// Subject weights for one perturbed refit: n i.i.d. Exp(1) draws.
struct PerturbationDraw {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  std::vector<double> epsilon;
};

/// Draw `index` of the stream rooted at `master_seed`. Throws
/// NumericDomainError if the sample mean is further than 5/sqrt(n) from 1.
PerturbationDraw make_draw(std::uint64_t master_seed, std::uint64_t index, std::size_t n);

struct EnsembleOptions {
  std::size_t draws = 500;
  std::uint64_t master_seed = 1;
  unsigned threads = 1;
  /// Abort when more than this fraction of draws fail.
  double max_failure_fraction = 0.05;
};

/// Per-draw curve values on a shared grid.
struct PerturbationEnsemble {
  CurveGrid grid;
  /// values[kind] is successful-draws x grid points, rows in draw-index order.
  std::array<Eigen::MatrixXd, 4> values;
  std::vector<std::uint64_t> draw_indices;  // successful draws
  std::vector<std::uint64_t> failed_indices;
  std::vector<std::string> failure_messages;
  std::size_t requested = 0;

  std::size_t size() const noexcept { return draw_indices.size(); }
  const Eigen::MatrixXd& operator[](CurveKind k) const { return values[static_cast<std::size_t>(k)]; }
  /// Sample SD per grid point (divisor B - 1).
  Eigen::VectorXd sd(CurveKind k) const;
};

/// One perturbed pass of the whole pipeline, warm-started at `warm_start`.
CurveSet perturbed_refit(const Dataset& data, const PerturbationDraw& draw, const AnalysisConfig& config,
                         const CurveGrid& grid, const RiskParams& warm_start);

/// Runs `options.draws` perturbed refits on a worker pool. Results are
/// written into per-draw slots, so they do not depend on the thread count.
/// Throws ConvergenceError when failures exceed the allowed fraction.
PerturbationEnsemble run_ensemble(const Dataset& data, const AnalysisConfig& config, const CurveGrid& grid,
                                  const RiskParams& warm_start, const EnsembleOptions& options);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// est +- z_{1-alpha/2} se.
std::vector<Interval> pointwise_ci(const std::vector<double>& estimate, const Eigen::VectorXd& se, double alpha);

struct BandResult {
  double q = 0.0;
  double alpha = 0.05;
  std::vector<Interval> limits;
  std::vector<double> sup_statistics;  // per draw
  std::optional<std::string> warning;
};

inline constexpr std::size_t kMinBandDraws = 20;
inline constexpr std::size_t kRecommendedBandDraws = 100;

/// sup_s |(draw(s) - est(s)) / se(s)| per draw.
std::vector<double> sup_statistics(const std::vector<double>& estimate, const Eigen::MatrixXd& draws,
                                   const Eigen::VectorXd& se);

/// Inverse-ECDF quantile: the ceil(p * B)-th order statistic (0 when p = 0).
double ecdf_quantile(std::vector<double> values, double p);

/// Band est +- Q se with Q the (1 - alpha) quantile of the sup statistics.
/// Refuses fewer than 20 draws, warns below 100.
BandResult simultaneous_band(const std::vector<double>& estimate, const Eigen::MatrixXd& draws,
                             const Eigen::VectorXd& se, double alpha);

struct TestResult {
  double p_value = 1.0;
  /// 1 when alpha_1 (the band's upper limit reaches zero first) attains the
  /// minimum, 2 for alpha_2.
  int side = 1;
  double sup_stat = 0.0;  // max_s |d(s)| / se(s)
  double alpha1 = 1.0;
  double alpha2 = 1.0;
};

/// Band-inversion test of H0: d(s) = 0 on the grid, with
///   alpha_1 = 1 - F(max_s(-d/se)),  alpha_2 = 1 - F(max_s(d/se))
/// and F the ECDF of the ensemble sup statistics; p = min(alpha_1, alpha_2).
TestResult band_inversion_test(const std::vector<double>& diff_estimate, const Eigen::MatrixXd& diff_draws,
                               const Eigen::VectorXd& se);

/// Full per-kind estimate with SEs, intervals and bands.
struct CurveEstimate {
  CurveKind kind = CurveKind::Marginal;
  std::vector<double> grid;
  std::vector<CurvePoint> points;
  Eigen::VectorXd se;
  std::vector<Interval> ci;
  BandResult band;
};

CurveEstimate summarize_curve(CurveKind kind, const CurveGrid& grid, const CurveSet& estimate,
                              const PerturbationEnsemble& ensemble, double alpha);

}  // namespace emcurve
