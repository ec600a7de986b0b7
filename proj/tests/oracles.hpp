#pragma once

// Reference computations that share no code with the library.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

namespace oracle {

inline double Phi(double x) { return boost::math::cdf(boost::math::normal(), x); }
inline double phi(double x) { return boost::math::pdf(boost::math::normal(), x); }
inline double Phi_inv(double p) { return boost::math::quantile(boost::math::normal(), p); }

/// Stratified sample of N(0,1): one jittered draw per equal-probability cell.
inline std::vector<double> stratified_normal(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double p = (static_cast<double>(i) + u(rng)) / static_cast<double>(n);
    p = std::min(std::max(p, 1e-300), 1.0 - 1e-16);
    out[i] = Phi_inv(p);
  }
  return out;
}

/// E f(Z) for Z ~ N(0,1) by stratified sampling with n draws.
inline double expect_1d(std::size_t n, std::mt19937_64& rng, const std::function<double(double)>& f) {
  double acc = 0.0;
  for (double z : stratified_normal(n, rng)) acc += f(z);
  return acc / static_cast<double>(n);
}

/// E f(Z1, Z2) for independent N(0,1) by a jittered m x m grid (n = m^2 draws).
inline double expect_2d(std::size_t m, std::mt19937_64& rng, const std::function<double(double, double)>& f) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double p1 = std::min(std::max((i + u(rng)) / m, 1e-300), 1.0 - 1e-16);
      const double p2 = std::min(std::max((j + u(rng)) / m, 1e-300), 1.0 - 1e-16);
      acc += f(Phi_inv(p1), Phi_inv(p2));
    }
  }
  return acc / static_cast<double>(m * m);
}

/// Weighted probit MLE by Fisher scoring (IRLS), iterated to convergence.
inline Eigen::VectorXd probit_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
  for (int it = 0; it < 200; ++it) {
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(X.cols(), X.cols());
    Eigen::VectorXd score = Eigen::VectorXd::Zero(X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double eta = X.row(i).dot(beta);
      const double p = std::min(std::max(Phi(eta), 1e-300), 1.0 - 1e-16);
      const double d = phi(eta);
      score += w[i] * (y[i] - p) * d / (p * (1.0 - p)) * X.row(i).transpose();
      info += w[i] * d * d / (p * (1.0 - p)) * X.row(i).transpose() * X.row(i);
    }
    const Eigen::VectorXd step = info.ldlt().solve(score);
    beta += step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-13) break;
  }
  return beta;
}

}  // namespace oracle
