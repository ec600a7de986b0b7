#include "emcurve/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace emcurve {

namespace {

struct LinePoint {
  double step = 0.0;
  double value = 0.0;
  double slope = 0.0;
  Eigen::VectorXd x;
  Eigen::VectorXd grad;
};

bool finite_point(const LinePoint& p) { return std::isfinite(p.value) && p.grad.allFinite(); }

// Sufficient decrease, falling back to the approximate-Wolfe test once the
// objective change is below its rounding resolution.
bool decrease_ok(const LinePoint& p, const LinePoint& p0, double c1) {
  if (p.value <= p0.value + c1 * p.step * p0.slope) return true;
  const double eps_f = 1e-12 * (1.0 + std::abs(p0.value));
  return p.value <= p0.value + eps_f && p.slope <= (1.0 - 2.0 * c1) * p0.slope;
}

double cubic_min(const LinePoint& a, const LinePoint& b) {
  const double d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.step - b.step);
  const double disc = d1 * d1 - a.slope * b.slope;
  const double mid = 0.5 * (a.step + b.step);
  if (!(disc >= 0.0)) return mid;
  const double d2 = std::copysign(std::sqrt(disc), b.step - a.step);
  const double t = b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
  const double lo = std::min(a.step, b.step), hi = std::max(a.step, b.step);
  const double margin = 0.1 * (hi - lo);
  if (!std::isfinite(t) || t < lo + margin || t > hi - margin) return mid;
  return t;
}

}  // namespace

OptimResult minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const OptimOptions& options) {
  const Eigen::Index n = x0.size();
  OptimResult res;
  res.x = x0;
  res.grad.resize(n);
  res.value = f(res.x, &res.grad);
  res.evaluations = 1;
  if (!std::isfinite(res.value) || !res.grad.allFinite()) {
    res.message = "objective not finite at the starting point";
    return res;
  }
  res.trace.push_back(res.value);

  constexpr double c1 = 1e-4;
  constexpr double c2 = 0.9;
  const bool seeded = options.initial_inverse_hessian.rows() == n && options.initial_inverse_hessian.cols() == n;
  Eigen::MatrixXd H = seeded ? options.initial_inverse_hessian : Eigen::MatrixXd::Identity(n, n);
  bool scaled = seeded;
  int resets = 0;
  int stalls = 0;

  auto evaluate = [&](const Eigen::VectorXd& dir, double step, const Eigen::VectorXd& base) {
    LinePoint p;
    p.step = step;
    p.x = base + step * dir;
    p.grad.resize(n);
    p.value = f(p.x, &p.grad);
    p.slope = p.grad.dot(dir);
    ++res.evaluations;
    return p;
  };

  for (int it = 0; it < options.max_iterations; ++it) {
    if (res.grad_norm() <= options.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }
    Eigen::VectorXd dir = -H * res.grad;
    double slope0 = res.grad.dot(dir);
    if (!(slope0 < 0.0)) {
      H.setIdentity();
      scaled = false;
      dir = -res.grad;
      slope0 = res.grad.dot(dir);
    }
    LinePoint p0;
    p0.step = 0.0;
    p0.value = res.value;
    p0.slope = slope0;
    p0.x = res.x;
    p0.grad = res.grad;

    double step = 1.0;
    if (!scaled) step = std::min(1.0, 1.0 / std::max(1e-12, dir.cwiseAbs().maxCoeff()));

    const double eps_f = 1e-12 * (1.0 + std::abs(p0.value));
    // p is no better than q: higher value, or a tie within rounding with a steeper slope.
    auto worse = [&](const LinePoint& p, const LinePoint& q) {
      if (p.value > q.value + eps_f) return true;
      if (p.value < q.value - eps_f) return false;
      return std::abs(p.slope) >= std::abs(q.slope) && p.step != q.step;
    };
    auto curvature_ok = [&](const LinePoint& p) { return std::abs(p.slope) <= -c2 * p0.slope; };

    LinePoint accepted;
    bool ok = false;
    auto zoom = [&](LinePoint lo, LinePoint hi) {
      for (int j = 0; j < 40; ++j) {
        double t = finite_point(hi) ? cubic_min(lo, hi) : 0.5 * (lo.step + hi.step);
        if (std::abs(hi.step - lo.step) <= 1e-14 * std::max(1e-8, std::abs(lo.step))) break;
        LinePoint p = evaluate(dir, t, res.x);
        if (!finite_point(p) || !decrease_ok(p, p0, c1) || worse(p, lo)) {
          hi = p;
        } else {
          if (curvature_ok(p)) {
            accepted = p;
            ok = true;
            return;
          }
          if (p.slope * (hi.step - lo.step) >= 0.0) hi = lo;
          lo = p;
        }
      }
      if (lo.step > 0.0) {
        accepted = lo;
        ok = true;
      }
    };

    LinePoint prev = p0;
    for (int ls = 0; ls < 40; ++ls) {
      LinePoint p = evaluate(dir, step, res.x);
      if (!finite_point(p)) {
        step = 0.5 * (prev.step + step);
        continue;
      }
      if (!decrease_ok(p, p0, c1) || (ls > 0 && worse(p, prev))) {
        zoom(prev, p);
        break;
      }
      if (curvature_ok(p)) {
        accepted = p;
        ok = true;
        break;
      }
      if (p.slope >= 0.0) {
        zoom(p, prev);
        break;
      }
      prev = p;
      step *= 4.0;
    }
    if (!ok && prev.step > 0.0) {
      accepted = prev;
      ok = true;
    }
    if (!ok) {
      if (resets < 2 && scaled) {
        H.setIdentity();
        scaled = false;
        ++resets;
        continue;
      }
      res.message = "line search failed";
      break;
    }

    const Eigen::VectorXd s = accepted.x - res.x;
    const Eigen::VectorXd yv = accepted.grad - res.grad;
    if (std::abs(accepted.value - res.value) <= eps_f && s.cwiseAbs().maxCoeff() <= 1e-13 * (1.0 + res.x.cwiseAbs().maxCoeff())) {
      ++stalls;
    } else {
      stalls = 0;
    }
    res.x = accepted.x;
    res.grad = accepted.grad;
    res.value = accepted.value;
    res.iterations = it + 1;
    res.trace.push_back(res.value);
    if (stalls >= 3) {
      res.message = "stalled";
      break;
    }

    const double sy = s.dot(yv);
    if (sy > 1e-14 * s.norm() * yv.norm()) {
      if (!scaled) {
        H *= sy / yv.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * yv;
      const double yHy = yv.dot(Hy);
      H += (rho * rho * yHy + rho) * (s * s.transpose()) - rho * (Hy * s.transpose() + s * Hy.transpose());
    }
  }
  if (!res.converged && res.grad_norm() <= options.grad_tol) {
    res.converged = true;
    res.message = "gradient tolerance reached";
  }
  if (res.converged && res.message.empty()) res.message = "gradient tolerance reached";

  // Newton polish on a finite-difference Hessian when BFGS stalled close to
  // the optimum.
  for (int k = 0; k < options.newton_polish_steps && !res.converged; ++k) {
    const Eigen::MatrixXd hess = fd_hessian(f, res.x);
    res.evaluations += static_cast<int>(2 * n);
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (hess + hess.transpose()));
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd dir = llt.solve(-res.grad);
    double step = 1.0;
    bool improved = false;
    for (int half = 0; half < 20; ++half, step *= 0.5) {
      Eigen::VectorXd g(n);
      const Eigen::VectorXd xn = res.x + step * dir;
      const double v = f(xn, &g);
      ++res.evaluations;
      if (std::isfinite(v) && g.allFinite() &&
          (v < res.value || (v <= res.value + 1e-12 * (1.0 + std::abs(res.value)) &&
                             g.cwiseAbs().maxCoeff() < res.grad_norm()))) {
        res.x = xn;
        res.value = v;
        res.grad = g;
        improved = true;
        break;
      }
    }
    if (!improved) break;
    if (res.grad_norm() <= options.grad_tol) {
      res.converged = true;
      res.message = "gradient tolerance reached after Newton polish";
    }
  }
  return res;
}

Eigen::MatrixXd fd_hessian(const Objective& f, const Eigen::VectorXd& x, double rel_step) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd gp(n), gm(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = rel_step * std::max(1.0, std::abs(x[j]));
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    f(xp, &gp);
    f(xm, &gm);
    H.col(j) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

Eigen::VectorXd fd_gradient(const Objective& f, const Eigen::VectorXd& x, double rel_step) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd g(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = rel_step * std::max(1.0, std::abs(x[j]));
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    g[j] = (f(xp, nullptr) - f(xm, nullptr)) / (2.0 * h);
  }
  return g;
}

}  // namespace emcurve
