#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace emcurve {

/// One subject. `s` and `b` carry the post-censoring biomarker values and are
/// present exactly when the corresponding marker was measured.
struct Observation {
  int z = 0;      // 1 vaccine, 0 placebo
  int x = 1;      // covariate level in 1..D
  int y_tau = 0;  // event before the biomarker visit
  int y = 0;      // clinical endpoint
  std::optional<double> s;
  std::optional<double> b;
  std::optional<double> weight_s;  // known sampling probability of S
  std::optional<double> weight_b;  // known sampling probability of B

  bool delta() const noexcept { return s.has_value(); }
  bool delta_b() const noexcept { return b.has_value(); }
};

/// Assay floor shared by S and B; observed values are max(latent, c).
struct DetectionLimit {
  double c = 1.0;
};

/// Coefficients of the probit risk model
///   Phi(b0 + b1 Z + b2 S + b3 Z S + b4 B + b5 Z B + b6' dummies(X))
/// with level 1 of X as the reference.
struct RiskParams {
  double beta0 = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
  double beta3 = 0.0;
  double beta4 = 0.0;
  double beta5 = 0.0;
  std::vector<double> beta6;

  int levels() const noexcept { return static_cast<int>(beta6.size()) + 1; }
  std::size_t size() const noexcept { return 6 + beta6.size(); }

  double linear_predictor(int z, double s, double b, int x) const noexcept {
    double eta = beta0 + beta1 * z + (beta2 + beta3 * z) * s + (beta4 + beta5 * z) * b;
    if (x > 1) eta += beta6[static_cast<std::size_t>(x - 2)];
    return eta;
  }

  Eigen::VectorXd to_vector() const;
  static RiskParams from_vector(const Eigen::Ref<const Eigen::VectorXd>& v);
  /// Throws ValidationError unless every entry is finite and beta6 has D-1 entries.
  void validate(int levels) const;
};

/// Risk probability; throws NumericDomainError for a non-finite linear predictor.
double risk(const RiskParams& params, int z, double s, double b, int x);

enum class ContrastKind { VE, Difference, LogRatio };

struct Contrast {
  ContrastKind kind = ContrastKind::VE;

  /// h(r1, r0); ratio contrasts throw NumericDomainError when r0 == 0.
  double operator()(double r1, double r0) const;
  std::string name() const;
  static Contrast parse(const std::string& name);
};

double contrast_eval(Contrast h, double r1, double r0);

}  // namespace emcurve
