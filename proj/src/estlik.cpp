#include "emcurve/estlik.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include <fmt/format.h>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"
#include "emcurve/optimize.hpp"

namespace emcurve {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double s_mean(const CensoredNormalModel& m, double b_latent, int x) { return response_mean(m, b_latent, x); }

// Atoms of S given latent B* = b_latent, with the risk evaluated at b_risk.
void append_s_atoms(const NuisanceParams& nu, const Quadrature& quad, double b_latent, double b_risk, int x,
                    double scale, std::vector<QuadAtom>& scratch, std::vector<RiskAtom>& out) {
  scratch.clear();
  quad.censored(s_mean(nu.s_given_b, b_latent, x), nu.s_given_b.sigma, nu.s_given_b.limit, scratch);
  for (const auto& a : scratch) out.push_back({a.value, b_risk, scale * a.weight});
}

// Atoms of B* restricted to one side of c.
void b_side(const NuisanceParams& nu, const Quadrature& quad, int x, bool below, std::vector<QuadAtom>& out) {
  const double c = nu.b_given_x.limit;
  out.clear();
  const double mu = baseline_mean(nu.b_given_x, x);
  if (below) {
    quad.truncated(mu, nu.b_given_x.sigma, -kInf, c, out);
  } else {
    quad.truncated(mu, nu.b_given_x.sigma, c, kInf, out);
  }
}

// True when every observation of this branch with the same (z, x, y) shares
// one integration law.
bool is_pooled(const Observation& o, double c) {
  switch (branch_of(o)) {
    case Branch::Neither:
      return true;
    case Branch::BOnly:
      return !(*o.b > c);
    case Branch::SOnly:
      return !(*o.s > c);
    case Branch::Both:
      return false;
  }
  return false;
}

}  // namespace

void integration_atoms(const Observation& o, const NuisanceParams& nu, const Quadrature& quad,
                       std::vector<RiskAtom>& out) {
  const double c = nu.b_given_x.limit;
  std::vector<QuadAtom> bside, scratch;
  switch (branch_of(o)) {
    case Branch::Both:
      out.push_back({*o.s, *o.b, 1.0});
      return;
    case Branch::BOnly: {
      if (*o.b > c) {
        append_s_atoms(nu, quad, *o.b, *o.b, o.x, 1.0, scratch, out);
        return;
      }
      b_side(nu, quad, o.x, true, bside);
      double mass = 0.0;
      for (const auto& a : bside) mass += a.weight;
      if (!(mass > 0.0)) throw UnderflowError(fmt::format("P(B = c | x={}) underflows", o.x));
      for (const auto& a : bside) append_s_atoms(nu, quad, a.value, c, o.x, a.weight / mass, scratch, out);
      return;
    }
    case Branch::SOnly: {
      const MixedConditional mc = invert_to_b_given_s(nu.b_given_x, nu.s_given_b, *o.s, o.x, quad);
      out.push_back({*o.s, c, mc.point_mass});
      for (const auto& a : mc.continuous) out.push_back({*o.s, a.value, a.weight});
      return;
    }
    case Branch::Neither: {
      for (bool below : {true, false}) {
        b_side(nu, quad, o.x, below, bside);
        for (const auto& a : bside) {
          append_s_atoms(nu, quad, a.value, below ? c : a.value, o.x, a.weight, scratch, out);
        }
      }
      return;
    }
  }
}

double loglik_contribution(const Observation& o, const RiskParams& params, const NuisanceParams& nu,
                           const Quadrature& quad) {
  if (o.y_tau != 0) throw ValidationError("loglik_contribution: early-event rows are excluded from estimation");
  std::vector<RiskAtom> atoms;
  integration_atoms(o, nu, quad, atoms);
  if (atoms.size() == 1) {
    const double eta = params.linear_predictor(o.z, atoms[0].s, atoms[0].b, o.x);
    if (!std::isfinite(eta)) throw NumericDomainError("non-finite linear predictor");
    return normal_log_cdf(o.y == 1 ? eta : -eta);
  }
  double p = 0.0;
  for (const auto& a : atoms) {
    const double eta = params.linear_predictor(o.z, a.s, a.b, o.x);
    p += a.weight * normal_cdf(o.y == 1 ? eta : -eta);
  }
  return std::log(std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp));
}

EstimatedLikelihood::EstimatedLikelihood(const Dataset& data, const NuisanceParams& nu, const Quadrature& quad,
                                         std::span<const double> eps)
    : levels_(data.levels) {
  if (!eps.empty() && eps.size() != data.rows.size()) {
    throw ValidationError("perturbation weights do not match the dataset size");
  }
  const double c = data.limit.c;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto key = [&](std::size_t i) {
    const auto& o = data.rows[i];
    return std::make_tuple(static_cast<int>(branch_of(o)), o.z, o.x, o.y, o.s.value_or(nan), o.b.value_or(nan),
                           eps.empty() ? 1.0 : eps[i]);
  };
  std::vector<std::size_t> order(data.rows.size());
  std::iota(order.begin(), order.end(), 0);
  // NaN never compares, so missing markers are ordered through the branch index first.
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = key(a), kb = key(b);
    if (std::get<0>(ka) != std::get<0>(kb)) return std::get<0>(ka) < std::get<0>(kb);
    if (std::get<1>(ka) != std::get<1>(kb)) return std::get<1>(ka) < std::get<1>(kb);
    if (std::get<2>(ka) != std::get<2>(kb)) return std::get<2>(ka) < std::get<2>(kb);
    if (std::get<3>(ka) != std::get<3>(kb)) return std::get<3>(ka) < std::get<3>(kb);
    const auto lt = [](double u, double v) { return !std::isnan(u) && !std::isnan(v) && u < v; };
    if (lt(std::get<4>(ka), std::get<4>(kb))) return true;
    if (lt(std::get<4>(kb), std::get<4>(ka))) return false;
    if (lt(std::get<5>(ka), std::get<5>(kb))) return true;
    if (lt(std::get<5>(kb), std::get<5>(ka))) return false;
    return std::get<6>(ka) < std::get<6>(kb);
  });

  std::map<std::array<int, 4>, std::pair<std::size_t, double>> pooled;  // key -> (representative row, weight)
  std::vector<RiskAtom> atoms;
  auto push_term = [&](const Observation& o, double weight) {
    atoms.clear();
    integration_atoms(o, nu, quad, atoms);
    Term t{o.z, o.x, o.y, weight, s_.size(), 0};
    for (const auto& a : atoms) {
      if (a.weight <= 0.0) continue;
      s_.push_back(a.s);
      b_.push_back(a.b);
      w_.push_back(a.weight);
    }
    t.end = s_.size();
    terms_.push_back(t);
  };
  for (std::size_t i : order) {
    const auto& o = data.rows[i];
    if (o.y_tau != 0) throw ValidationError("estimated likelihood: early-event rows must be excluded");
    const double w = eps.empty() ? 1.0 : eps[i];
    ++branch_counts_[static_cast<std::size_t>(branch_of(o))];
    if (w == 0.0) continue;
    if (is_pooled(o, c)) {
      auto [it, fresh] = pooled.try_emplace({static_cast<int>(branch_of(o)), o.z, o.x, o.y}, i, 0.0);
      it->second.second += w;
      continue;
    }
    push_term(o, w);
  }
  for (const auto& [k, v] : pooled) push_term(data.rows[v.first], v.second);
}

double EstimatedLikelihood::operator()(const Eigen::VectorXd& beta, Eigen::VectorXd* grad) const {
  const Eigen::Index p = 6 + levels_ - 1;
  if (beta.size() != p) throw ValidationError("estimated likelihood: wrong parameter length");
  if (grad) grad->setZero(p);
  clamps_ = 0;
  double ll = 0.0;
  for (const auto& t : terms_) {
    const double z = t.z;
    const double base = beta[0] + beta[1] * z + (t.x > 1 ? beta[6 + t.x - 2] : 0.0);
    const double cs = beta[2] + beta[3] * z;
    const double cb = beta[4] + beta[5] * z;
    const double sign = t.y == 1 ? 1.0 : -1.0;
    double g0 = 0.0, gs = 0.0, gb = 0.0, factor = 0.0;
    if (t.end - t.begin == 1) {
      const double eta = base + cs * s_[t.begin] + cb * b_[t.begin];
      if (!std::isfinite(eta)) throw NumericDomainError("non-finite linear predictor");
      ll += t.weight * normal_log_cdf(sign * eta);
      if (grad) {
        factor = t.weight * sign * normal_mills(sign * eta);
        g0 = 1.0;
        gs = s_[t.begin];
        gb = b_[t.begin];
      }
    } else {
      double prob = 0.0;
      for (std::size_t k = t.begin; k < t.end; ++k) {
        const double eta = base + cs * s_[k] + cb * b_[k];
        prob += w_[k] * normal_cdf(sign * eta);
        if (grad) {
          const double d = w_[k] * normal_pdf(eta);
          g0 += d;
          gs += d * s_[k];
          gb += d * b_[k];
        }
      }
      if (!std::isfinite(prob)) throw NumericDomainError("non-finite likelihood term");
      if (prob < kProbabilityClamp || prob > 1.0 - kProbabilityClamp) {
        ++clamps_;
        ll += t.weight * std::log(std::clamp(prob, kProbabilityClamp, 1.0 - kProbabilityClamp));
        continue;
      }
      ll += t.weight * std::log(prob);
      factor = t.weight * sign / prob;
    }
    if (grad) {
      auto& g = *grad;
      g[0] += factor * g0;
      g[1] += factor * z * g0;
      g[2] += factor * gs;
      g[3] += factor * z * gs;
      g[4] += factor * gb;
      g[5] += factor * z * gb;
      if (t.x > 1) g[6 + t.x - 2] += factor * g0;
    }
  }
  return ll;
}

Eigen::MatrixXd EstimatedLikelihood::hessian(const Eigen::VectorXd& beta) const {
  const Eigen::Index p = 6 + levels_ - 1;
  if (beta.size() != p) throw ValidationError("estimated likelihood: wrong parameter length");
  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, 3);
  for (const auto& t : terms_) {
    const double z = t.z;
    const double base = beta[0] + beta[1] * z + (t.x > 1 ? beta[6 + t.x - 2] : 0.0);
    const double cs = beta[2] + beta[3] * z;
    const double cb = beta[4] + beta[5] * z;
    const double sign = t.y == 1 ? 1.0 : -1.0;
    // Hessian in u = (1, s, b) coordinates.
    Eigen::Matrix3d hu;
    if (t.end - t.begin == 1) {
      const Eigen::Vector3d u(1.0, s_[t.begin], b_[t.begin]);
      const double eta = sign * (base + cs * u[1] + cb * u[2]);
      const double m = normal_mills(eta);
      hu = (-m * (eta + m)) * (u * u.transpose());
    } else {
      double prob = 0.0;
      Eigen::Vector3d g = Eigen::Vector3d::Zero();
      Eigen::Matrix3d mm = Eigen::Matrix3d::Zero();
      for (std::size_t k = t.begin; k < t.end; ++k) {
        const Eigen::Vector3d u(1.0, s_[k], b_[k]);
        const double eta = base + cs * u[1] + cb * u[2];
        prob += w_[k] * normal_cdf(sign * eta);
        const double d = w_[k] * normal_pdf(eta);
        g += d * u;
        mm -= (d * eta) * (u * u.transpose());
      }
      if (prob < kProbabilityClamp || prob > 1.0 - kProbabilityClamp) continue;
      hu = (sign / prob) * mm - (g * g.transpose()) / (prob * prob);
    }
    a.setZero();
    for (int j = 0; j < 3; ++j) {
      a(2 * j, j) = 1.0;
      a(2 * j + 1, j) = z;
    }
    if (t.x > 1) a(6 + t.x - 2, 0) = 1.0;
    hess.noalias() += t.weight * (a * hu * a.transpose());
  }
  return hess;
}

RiskParams default_init(const Dataset& data) {
  double events = 0.0;
  for (const auto& o : data.rows) events += o.y;
  const double n = static_cast<double>(data.rows.size());
  RiskParams init;
  init.beta6.assign(static_cast<std::size_t>(std::max(data.levels - 1, 0)), 0.0);
  const double rate = std::clamp(n > 0 ? events / n : 0.5, 1e-6, 1.0 - 1e-6);
  init.beta0 = normal_quantile(rate);
  return init;
}

FitResult fit_beta(const Dataset& data, const NuisanceParams& nu, const Quadrature& quad, const RiskParams& init,
                   std::span<const double> eps, const BetaFitOptions& options) {
  if (nu.b_given_x.limit != data.limit.c || nu.s_given_b.limit != data.limit.c) {
    throw ValidationError("fit_beta: nuisance models use a different detection limit");
  }
  if (nu.b_given_x.coefficients.size() != data.levels || nu.s_given_b.coefficients.size() != data.levels + 1) {
    throw ValidationError("fit_beta: nuisance models use a different number of covariate levels");
  }
  init.validate(data.levels);
  const EstimatedLikelihood lik(data, nu, quad, eps);
  double total = 0.0;
  if (eps.empty()) {
    total = static_cast<double>(data.rows.size());
  } else {
    for (double e : eps) total += e;
  }
  if (!(total > 0.0)) throw ValidationError("fit_beta: total weight is zero");

  // Optimise the mean log-likelihood so tolerances do not scale with n.
  Objective obj = [&](const Eigen::VectorXd& beta, Eigen::VectorXd* grad) {
    const double ll = lik(beta, grad);
    if (grad) *grad = -*grad / total;
    return -ll / total;
  };
  OptimOptions opts;
  opts.max_iterations = options.max_iterations;
  opts.grad_tol = options.grad_tol / total;
  // Seed the quasi-Newton metric with the exact curvature at the start, with
  // eigenvalues reflected and floored where the likelihood is not concave.
  {
    const Eigen::MatrixXd h0 = -lik.hessian(init.to_vector()) / total;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (h0 + h0.transpose()));
    if (es.info() == Eigen::Success) {
      Eigen::VectorXd ev = es.eigenvalues().cwiseAbs();
      const double floor = std::max(1e-3 * ev.maxCoeff(), 1e-12);
      ev = ev.cwiseMax(floor).cwiseInverse();
      if (ev.allFinite()) opts.initial_inverse_hessian = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
  }
  opts.grad_tol = std::max(opts.grad_tol, 1e-4 / total);
  opts.newton_polish_steps = 0;
  OptimResult res = minimize_bfgs(obj, init.to_vector(), opts);

  // Newton steps on the analytic Hessian once BFGS is close: near the optimum
  // the objective changes below its rounding resolution, so a step is kept
  // when it shrinks the gradient.
  for (int k = 0; k < 8 && res.grad_norm() * total > options.grad_tol; ++k) {
    const Eigen::MatrixXd h = -lik.hessian(res.x) / total;
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success) break;
    const Eigen::VectorXd dir = llt.solve(-res.grad);
    bool improved = false;
    double step = 1.0;
    for (int half = 0; half < 10; ++half, step *= 0.5) {
      Eigen::VectorXd g;
      const Eigen::VectorXd xn = res.x + step * dir;
      const double v = obj(xn, &g);
      ++res.evaluations;
      if (std::isfinite(v) && v <= res.value + 1e-12 * (1.0 + std::abs(res.value)) &&
          g.cwiseAbs().maxCoeff() < res.grad_norm()) {
        res.x = xn;
        res.value = v;
        res.grad = g;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }

  FitResult out;
  out.beta_hat = RiskParams::from_vector(res.x);
  out.log_likelihood = -res.value * total;
  out.iterations = res.iterations;
  out.evaluations = res.evaluations;
  out.grad_norm = res.grad_norm() * total;
  out.converged = out.grad_norm <= 1e-5;
  out.message = res.message;
  out.branch_counts = lik.branch_counts();
  Eigen::VectorXd g;
  lik(res.x, &g);
  out.clamp_count = lik.last_clamp_count();
  if (!out.converged || !std::isfinite(out.log_likelihood)) {
    throw ConvergenceError(fmt::format("fit_beta did not converge after {} iterations: {} (gradient {:.3g}); best "
                                       "iterate log-likelihood {:.10g}",
                                       res.iterations, res.message, out.grad_norm, out.log_likelihood),
                           res.trace);
  }
  if (options.check_identifiability) {
    const Eigen::MatrixXd h = -lik.hessian(res.x) / total;
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(0.5 * (h + h.transpose())).eigenvalues();
    const double lo = ev.minCoeff(), hi = ev.maxCoeff();
    out.hessian_condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    out.identifiability_warning = out.hessian_condition > options.condition_limit;
  }
  return out;
}

}  // namespace emcurve
