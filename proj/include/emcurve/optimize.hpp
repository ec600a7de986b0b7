#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace emcurve {

/// Returns f(x); writes the gradient into `grad` when it is non-null.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct OptimOptions {
  int max_iterations = 500;
  /// Convergence when max_i |grad_i| <= grad_tol.
  double grad_tol = 1e-8;
  /// When BFGS stalls above grad_tol, try up to this many Newton steps on a
  /// finite-difference Hessian built from the analytic gradient.
  int newton_polish_steps = 4;
  /// Starting inverse-Hessian approximation; identity when empty.
  Eigen::MatrixXd initial_inverse_hessian;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trace;  // objective value per iteration

  double grad_norm() const { return grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0; }
};

/// Quasi-Newton minimisation with an approximate-Wolfe line search.
OptimResult minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& options = {});

/// Central-difference Hessian of an analytic gradient.
Eigen::MatrixXd fd_hessian(const Objective& f, const Eigen::VectorXd& x, double rel_step = 1e-5);

/// Central-difference gradient of the objective value.
Eigen::VectorXd fd_gradient(const Objective& f, const Eigen::VectorXd& x, double rel_step = 1e-6);

}  // namespace emcurve
