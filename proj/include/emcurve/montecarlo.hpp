#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "emcurve/inference.hpp"
#include "emcurve/pipeline.hpp"
#include "emcurve/simgen.hpp"

namespace emcurve {

struct MonteCarloOptions {
  std::size_t replications = 100;
  std::size_t perturbations = 250;
  double alpha = 0.05;
  unsigned threads = 1;
  std::uint64_t master_seed = 1;
  /// Abort when more than this fraction of replications fail.
  double max_failure_fraction = 0.10;
  /// Share of the grid, centred, on which bias and pointwise coverage are judged.
  double central_fraction = 0.90;
  AnalysisConfig analysis;
};

/// Outcome of one simulated trial.
struct ReplicationResult {
  bool ok = false;
  std::string error;
  std::array<std::vector<double>, 4> estimate;
  std::array<std::vector<double>, 4> se;
  std::array<std::vector<char>, 4> covered;  // truth inside the pointwise CI
  std::array<char, 4> band_covered{};
  std::array<double, 4> q{};
  TestResult test;
  std::size_t failed_draws = 0;
};

/// Figures 1-2 quantities per curve kind and grid point.
struct MonteCarloReport {
  std::vector<double> grid;
  std::vector<char> central;
  std::array<std::vector<double>, 4> truth;
  std::array<std::vector<double>, 4> mean_estimate;
  std::array<std::vector<double>, 4> bias;
  std::array<std::vector<double>, 4> mc_sd;    // SD of the estimates across replications
  std::array<std::vector<double>, 4> mean_se;  // mean perturbation SE
  std::array<std::vector<double>, 4> pointwise_cover;
  std::array<double, 4> simultaneous_cover{};
  double rejection_rate = 0.0;  // band-inversion test at level alpha
  double alpha = 0.05;
  std::size_t requested = 0;
  std::size_t completed = 0;
  std::vector<std::size_t> failed;  // replication indices
  std::vector<std::string> failure_messages;
  std::size_t failed_draws = 0;
  std::vector<std::string> warnings;
  std::vector<ReplicationResult> replications;
};

/// Fixed evaluation grid: 51 points between the 2.5th and 97.5th percentiles
/// of S(1) in the generator population.
CurveGrid population_grid(const SimConfig& config, std::size_t subjects = 1'000'000, std::uint64_t seed = 7);

ReplicationResult run_replication(const SimConfig& config, std::uint64_t index, const CurveGrid& grid,
                                  const TrueCurves& truth, const MonteCarloOptions& options);

/// Throws ConvergenceError (with the partial report in the message) when
/// failures exceed the allowed fraction.
MonteCarloReport monte_carlo(const SimConfig& config, const CurveGrid& grid, const TrueCurves& truth,
                             const MonteCarloOptions& options);

/// `s,kind,truth,mean_est,bias,mc_sd,mean_se,pointwise_cover,central`
void write_mc_points(std::ostream& out, const MonteCarloReport& report);
/// `kind,simultaneous_cover,replications,failures`
void write_mc_summary(std::ostream& out, const MonteCarloReport& report);
/// `replication,p_value,side,sup_stat,reject`
void write_mc_tests(std::ostream& out, const MonteCarloReport& report);

}  // namespace emcurve
