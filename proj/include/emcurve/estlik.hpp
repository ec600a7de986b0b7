#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emcurve/dataset.hpp"
#include "emcurve/model.hpp"
#include "emcurve/nuisance.hpp"
#include "emcurve/quadrature.hpp"

namespace emcurve {

/// Missingness branch of an observation, indexed by 2 * delta_b + delta.
enum class Branch { Neither = 0, SOnly = 1, BOnly = 2, Both = 3 };

inline Branch branch_of(const Observation& o) {
  return static_cast<Branch>((o.delta_b() ? 2 : 0) + (o.delta() ? 1 : 0));
}

/// A point (s, b) of an integration law with its probability.
struct RiskAtom {
  double s = 0.0;
  double b = 0.0;
  double weight = 0.0;
};

/// Appends the atoms of the law of the unobserved markers of `o` given its
/// observed data under the nuisance laws. The (1,1) branch yields one atom.
///   (1,0)  S | B, X            (B = c marginalised over B* < c)
///   (0,1)  B | S, X            mixed conditional from Bayes inversion
///   (0,0)  (S, B) | X
void integration_atoms(const Observation& o, const NuisanceParams& nuisance, const Quadrature& quad,
                       std::vector<RiskAtom>& out);

/// log P(Y = y | observed data) for one observation.
double loglik_contribution(const Observation& o, const RiskParams& params, const NuisanceParams& nuisance,
                           const Quadrature& quad);

/// The estimated likelihood L(beta, nu-hat) with frozen nuisance laws.
///
/// Observations whose integration law depends only on (z, x) are merged into
/// one weighted term, and terms are kept in a canonical order so that the sum
/// does not depend on the order of the input rows.
class EstimatedLikelihood {
 public:
  EstimatedLikelihood(const Dataset& data, const NuisanceParams& nuisance, const Quadrature& quad,
                      std::span<const double> eps = {});

  /// Weighted log-likelihood; the gradient in RiskParams::to_vector order is
  /// written to `grad` when non-null.
  double operator()(const Eigen::VectorXd& beta, Eigen::VectorXd* grad) const;
  /// Analytic Hessian of the weighted log-likelihood.
  Eigen::MatrixXd hessian(const Eigen::VectorXd& beta) const;

  int levels() const noexcept { return levels_; }
  std::size_t term_count() const noexcept { return terms_.size(); }
  std::size_t atom_count() const noexcept { return s_.size(); }
  const std::array<std::size_t, 4>& branch_counts() const noexcept { return branch_counts_; }
  /// Number of probabilities clamped into [1e-12, 1 - 1e-12] by the last evaluation.
  std::size_t last_clamp_count() const noexcept { return clamps_; }

 private:
  struct Term {
    int z = 0;
    int x = 1;
    int y = 0;
    double weight = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
  };
  int levels_ = 1;
  std::vector<Term> terms_;
  std::vector<double> s_, b_, w_;
  std::array<std::size_t, 4> branch_counts_{};
  mutable std::size_t clamps_ = 0;
};

inline constexpr double kProbabilityClamp = 1e-12;

struct BetaFitOptions {
  int max_iterations = 500;
  double grad_tol = 1e-7;
  /// Compute a finite-difference Hessian at the optimum and flag flat directions.
  bool check_identifiability = true;
  double condition_limit = 1e10;
};

struct FitResult {
  RiskParams beta_hat;
  double log_likelihood = 0.0;
  int iterations = 0;
  int evaluations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  std::string message;
  std::array<std::size_t, 4> branch_counts{};
  std::size_t clamp_count = 0;
  double hessian_condition = 0.0;  // 0 when not computed
  bool identifiability_warning = false;
};

/// beta = 0 except the intercept Phi^{-1}(overall event rate).
RiskParams default_init(const Dataset& data);

FitResult fit_beta(const Dataset& data, const NuisanceParams& nuisance, const Quadrature& quad,
                   const RiskParams& init, std::span<const double> eps = {}, const BetaFitOptions& options = {});

}  // namespace emcurve
