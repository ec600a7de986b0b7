#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emcurve/dataset.hpp"
#include "emcurve/model.hpp"
#include "emcurve/quadrature.hpp"

namespace emcurve {

/// Latent-normal regression observed through max(latent, c).
struct CensoredNormalModel {
  Eigen::VectorXd coefficients;
  double sigma = 1.0;
  double limit = 1.0;

  double mean(const Eigen::Ref<const Eigen::VectorXd>& row) const { return coefficients.dot(row); }
  /// P(observed == c | row) = Phi((c - mu)/sigma).
  double prob_at_limit(const Eigen::Ref<const Eigen::VectorXd>& row) const;
};

// Designs of the two nuisance regressions. X enters through dummies against level 1.
//   B* | X      : [1, dummies(x)]
//   S* | B*, X  : [1, b, dummies(x)]
Eigen::VectorXd baseline_design(int x, int levels);
Eigen::VectorXd response_design(double b, int x, int levels);

inline double baseline_mean(const CensoredNormalModel& m, int x) {
  return m.coefficients[0] + (x > 1 ? m.coefficients[x - 1] : 0.0);
}
inline double response_mean(const CensoredNormalModel& m, double b, int x) {
  return m.coefficients[0] + m.coefficients[1] * b + (x > 1 ? m.coefficients[x] : 0.0);
}

struct FitDiagnostics {
  int iterations = 0;
  double grad_norm = 0.0;
  double log_likelihood = 0.0;
  bool converged = false;
  std::string message;
};

struct CensoredNormalFit {
  CensoredNormalModel model;
  FitDiagnostics diag;
};

/// Weighted Tobit log-likelihood at theta = (coefficients, log sigma).
/// The score with respect to theta is written to `score` when non-null.
double censored_normal_loglik(const Eigen::VectorXd& theta, std::span<const double> responses,
                              const Eigen::MatrixXd& design, std::span<const double> weights, double c,
                              Eigen::VectorXd* score);

/// Maximises the weighted Tobit likelihood. Starts from weighted least
/// squares with sigma inflated by 1.2.
CensoredNormalFit fit_censored_normal(std::span<const double> responses, const Eigen::MatrixXd& design,
                                      std::span<const double> weights, DetectionLimit limit);

struct SamplingConfig {
  /// Add delta_b as an S stratifier for subsets that require both markers.
  bool stratify_s_by_delta_b = true;
};

/// Sampling probabilities for the two-phase design.
///   pi_s        P(delta = 1 | z, y, x)             (subsets requiring S)
///   pi_s_joint  P(delta = 1 | z, y, x, delta_b)    (subsets requiring S and B)
///   pi_b        P(delta_b = 1 | z, x)
/// User-supplied weight columns take precedence over the tables.
class SamplingWeights {
 public:
  using SKey = std::array<int, 3>;
  using SJointKey = std::array<int, 4>;
  using BKey = std::array<int, 2>;

  double pi_s(const Observation& o) const;
  double pi_s_joint(const Observation& o) const;
  double pi_b(const Observation& o) const;

  const std::map<SKey, double>& s_table() const { return s_; }
  const std::map<SJointKey, double>& s_joint_table() const { return s_joint_; }
  const std::map<BKey, double>& b_table() const { return b_; }
  bool stratified_by_delta_b() const { return stratified_; }

  static SamplingWeights from_tables(std::map<SKey, double> s, std::map<SJointKey, double> s_joint,
                                     std::map<BKey, double> b, bool stratified);

 private:
  std::map<SKey, double> s_;
  std::map<SJointKey, double> s_joint_;
  std::map<BKey, double> b_;
  bool stratified_ = true;
};

/// Empirical stratum fractions, optionally with perturbation weights `eps`.
SamplingWeights estimate_sampling_weights(const Dataset& data, std::span<const double> eps = {},
                                          SamplingConfig config = {});

/// F^{B|X}: Tobit of B on X dummies over {delta_b = 1}, weighted eps / pi_b.
CensoredNormalFit fit_b_given_x(const Dataset& data, const SamplingWeights& weights,
                                std::span<const double> eps = {});

/// F^{S|B,X}: latent S* | B*, X over vaccine recipients with both markers,
/// weighted eps / pi_s_joint. Rows with B = c enter marginalised over B* < c
/// under the plug-in `b_given_x`. Placebo (closeout) measurements are not used.
CensoredNormalFit fit_s_given_b(const Dataset& data, const SamplingWeights& weights,
                                const CensoredNormalModel& b_given_x, const Quadrature& quad,
                                std::span<const double> eps = {});

/// Conditional law of B given (S = s, X = x): point mass at c plus a
/// continuous part on b > c represented by quadrature atoms.
struct MixedConditional {
  double point_mass = 0.0;
  std::vector<QuadAtom> continuous;
  double log_normalizer = 0.0;  // log f(s | x)
  double limit = 1.0;

  double continuous_mass() const;
  /// Density of the continuous part at b > c.
  double density(double b) const;

  // Scalars needed to evaluate the density.
  double mu_b = 0.0, sd_b = 1.0;
  double s_intercept = 0.0, s_slope = 0.0, sd_s = 1.0;
  double s = 0.0;
};

MixedConditional invert_to_b_given_s(const CensoredNormalModel& b_given_x, const CensoredNormalModel& s_given_b,
                                     double s, int x, const Quadrature& quad);

/// Multinomial logit for P(X | s) with level 1 as the reference and a
/// polynomial of the standardised predictor.
struct MultinomialModel {
  int levels = 1;
  int degree = 1;
  double center = 0.0;
  double scale = 1.0;
  Eigen::MatrixXd gamma;  // (levels - 1) x (degree + 1)
  bool separation_warning = false;

  void probabilities(double s, std::span<double> out) const;
  std::vector<double> probabilities(double s) const;
};

struct MultinomialFit {
  MultinomialModel model;
  FitDiagnostics diag;
};

inline constexpr double kSeparationCap = 30.0;
/// Coefficients of the standardised predictor beyond this flag quasi-separation.
inline constexpr double kSeparationWarn = 10.0;

MultinomialFit fit_multinomial(std::span<const int> categories, std::span<const double> predictor,
                               std::span<const double> weights, int levels, int degree);

struct NuisanceParams {
  CensoredNormalModel b_given_x;
  CensoredNormalModel s_given_b;
};

}  // namespace emcurve
