#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "emcurve/curves.hpp"
#include "emcurve/dataset.hpp"
#include "emcurve/model.hpp"

namespace emcurve {

enum class SamplingDesign { BipOnly, BipCpv };
std::string design_name(SamplingDesign d);
SamplingDesign parse_design(const std::string& name);

/// A synthetic two-arm trial with two-phase biomarker sampling.
struct SimConfig {
  std::size_t n_subjects = 10000;
  double vaccine_ratio = 2.0;
  double placebo_ratio = 1.0;
  std::vector<double> x_probs{0.25, 0.25, 0.25, 0.25};
  std::vector<double> b_coef{1.38, 0.93, 1.25, -0.25};  // intercept, X2..XD
  double b_sd = 0.86;
  std::vector<double> s_coef{1.5, 0.5, 0.2, -0.1, 0.4};  // intercept, B*, X2..XD
  double s_sd = 0.4;
  double limit = 1.0;
  RiskParams beta{-0.643479, 0.16, -0.34, -0.21, -0.25, 0.0, {0.24, 0.11, 0.20}};
  SamplingDesign design = SamplingDesign::BipOnly;
  double b_sampling_fraction = 0.35;
  /// Sample B separately within each arm instead of over all subjects.
  bool b_sampling_by_arm = false;
  double cpv_fraction = 0.70;
  /// SD of additive error on the latent CPV measurement.
  double cpv_error_sd = 0.0;
  std::uint64_t master_seed = 20190101;

  int levels() const noexcept { return static_cast<int>(x_probs.size()); }
  double vaccine_probability() const noexcept { return vaccine_ratio / (vaccine_ratio + placebo_ratio); }
  /// Throws ValidationError on inconsistent sizes, probabilities or SDs.
  void validate() const;

  double b_mean(int x) const;
  double s_mean(double b_latent, int x) const;
};

/// Parses `key = value` lines; lists are comma-separated and '#' starts a
/// comment. Every key is required. Errors carry the line number.
SimConfig parse_sim_config(std::istream& in);
SimConfig read_sim_config_file(const std::string& path);
void write_sim_config(std::ostream& out, const SimConfig& config);

/// Latent and observed values of one simulated subject.
struct SimSubject {
  Observation obs;
  double s_latent = 0.0;  // S*(1)
  double b_latent = 0.0;  // B*
};

struct SimulatedTrial {
  std::vector<SimSubject> subjects;
  DetectionLimit limit;
  int levels = 1;

  std::vector<Observation> observations() const;
  /// Validated estimation set.
  Dataset dataset() const;
};

SimulatedTrial simulate_trial(const SimConfig& config, std::uint64_t seed);

/// Exact P(Y = 1 | Z = z) of the generator by quadrature over (X, B*, S*).
double generator_event_rate(const SimConfig& config, int z);

/// Brute-force potential-outcome curves. Subjects are binned on S(1) and
/// each grid point averages risks within a +-0.02 window, widened until it
/// holds at least 1000 subjects.
struct TrueCurves {
  std::vector<double> grid;
  std::vector<double> marginal, seropositive, seronegative;
  std::vector<double> half_width;  // per grid point, widest window used over the three strata
  std::size_t subjects = 0;
  std::vector<std::string> warnings;

  const std::vector<double>& operator[](CurveKind k) const;
  std::vector<double> difference() const;
};

struct OracleOptions {
  std::size_t subjects = 10'000'000;
  double window = 0.02;
  std::size_t min_window_count = 1000;
  double bin_width = 0.001;
  std::uint64_t seed = 1;
};

/// Quantiles of S(1) in the generator population.
std::vector<double> population_s_quantiles(const SimConfig& config, const std::vector<double>& probs,
                                           std::size_t subjects, std::uint64_t seed);

TrueCurves true_curves(const SimConfig& config, const CurveGrid& grid, Contrast h, const OracleOptions& options = {});

}  // namespace emcurve
