#include "emcurve/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <unsupported/Eigen/AutoDiff>

#include <fmt/format.h>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"
#include "emcurve/optimize.hpp"

namespace emcurve {

namespace {

using ADVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 32, 1>;
using AD = Eigen::AutoDiffScalar<ADVector>;

AD ad_log_cdf(const AD& x) {
  const double v = x.value();
  return AD(normal_log_cdf(v), x.derivatives() * normal_mills(v));
}

AD ad_log(const AD& x) { return AD(std::log(x.value()), x.derivatives() / x.value()); }
AD ad_exp(const AD& x) {
  const double e = std::exp(x.value());
  return AD(e, x.derivatives() * e);
}
AD ad_sqrt(const AD& x) {
  const double r = std::sqrt(x.value());
  return AD(r, x.derivatives() * (0.5 / r));
}

double weight_of(std::span<const double> eps, std::size_t i) { return eps.empty() ? 1.0 : eps[i]; }

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double t : v) m = std::max(m, t);
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (double t : v) acc += std::exp(t - m);
  return m + std::log(acc);
}

Eigen::VectorXd wls_start(std::span<const double> responses, const Eigen::MatrixXd& design,
                          std::span<const double> weights, double* sigma) {
  const Eigen::Index p = design.cols();
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
  double wsum = 0.0;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    xtx.noalias() += w * design.row(i).transpose() * design.row(i);
    xty.noalias() += w * responses[static_cast<std::size_t>(i)] * design.row(i).transpose();
    wsum += w;
  }
  Eigen::VectorXd beta = xtx.ldlt().solve(xty);
  if (!beta.allFinite()) beta = xtx.completeOrthogonalDecomposition().solve(xty);
  double rss = 0.0;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const double r = responses[static_cast<std::size_t>(i)] - design.row(i).dot(beta);
    rss += weights[static_cast<std::size_t>(i)] * r * r;
  }
  *sigma = std::sqrt(std::max(rss / wsum, 1e-8));
  return beta;
}

}  // namespace

double CensoredNormalModel::prob_at_limit(const Eigen::Ref<const Eigen::VectorXd>& row) const {
  return normal_cdf((limit - mean(row)) / sigma);
}

Eigen::VectorXd baseline_design(int x, int levels) {
  Eigen::VectorXd row = Eigen::VectorXd::Zero(levels);
  row[0] = 1.0;
  if (x > 1) row[x - 1] = 1.0;
  return row;
}

Eigen::VectorXd response_design(double b, int x, int levels) {
  Eigen::VectorXd row = Eigen::VectorXd::Zero(levels + 1);
  row[0] = 1.0;
  row[1] = b;
  if (x > 1) row[x] = 1.0;
  return row;
}

double censored_normal_loglik(const Eigen::VectorXd& theta, std::span<const double> responses,
                              const Eigen::MatrixXd& design, std::span<const double> weights, double c,
                              Eigen::VectorXd* score) {
  const Eigen::Index p = design.cols();
  const double log_sigma = theta[p];
  const double sigma = std::exp(log_sigma);
  if (score) score->setZero(p + 1);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const double w = weights[iu];
    if (w == 0.0) continue;
    const double mu = design.row(i).dot(theta.head(p));
    const double v = responses[iu];
    if (v > c) {
      const double r = (v - mu) / sigma;
      ll += w * (normal_log_pdf(r) - log_sigma);
      if (score) {
        score->head(p).noalias() += (w * r / sigma) * design.row(i).transpose();
        (*score)[p] += w * (r * r - 1.0);
      }
    } else {
      const double a = (c - mu) / sigma;
      ll += w * normal_log_cdf(a);
      if (score) {
        const double lam = normal_mills(a);
        score->head(p).noalias() -= (w * lam / sigma) * design.row(i).transpose();
        (*score)[p] -= w * lam * a;
      }
    }
  }
  return ll;
}

CensoredNormalFit fit_censored_normal(std::span<const double> responses, const Eigen::MatrixXd& design,
                                      std::span<const double> weights, DetectionLimit limit) {
  if (static_cast<std::size_t>(design.rows()) != responses.size() || responses.size() != weights.size()) {
    throw ValidationError("censored-normal fit: responses, design and weights differ in length");
  }
  double wsum = 0.0;
  bool any_uncensored = false;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    if (weights[i] < 0.0 || !std::isfinite(weights[i])) throw ValidationError("censored-normal fit: negative weight");
    wsum += weights[i];
    if (weights[i] > 0.0 && responses[i] > limit.c) any_uncensored = true;
  }
  if (!(wsum > 0.0)) throw ValidationError("censored-normal fit: all weights are zero");
  if (!any_uncensored) throw NonIdentifiableError("censored-normal fit: every response is censored at the limit");

  const Eigen::Index p = design.cols();
  double sigma0 = 1.0;
  Eigen::VectorXd theta(p + 1);
  theta.head(p) = wls_start(responses, design, weights, &sigma0);
  theta[p] = std::log(1.2 * sigma0);

  Objective obj = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
    const double ll = censored_normal_loglik(th, responses, design, weights, limit.c, grad);
    if (grad) *grad = -*grad;
    return -ll;
  };
  OptimOptions opts;
  opts.grad_tol = 1e-7;
  const OptimResult res = minimize_bfgs(obj, theta, opts);
  if (!res.converged && res.grad_norm() > 1e-6) {
    throw ConvergenceError(fmt::format("censored-normal fit did not converge: {} (gradient {:.3g})",
                                       res.message, res.grad_norm()),
                           res.trace);
  }
  CensoredNormalFit fit;
  fit.model.coefficients = res.x.head(p);
  fit.model.sigma = std::exp(res.x[p]);
  fit.model.limit = limit.c;
  fit.diag = {res.iterations, res.grad_norm(), -res.value, true, res.message};
  return fit;
}

// ---------------------------------------------------------------------------
// Sampling weights

SamplingWeights SamplingWeights::from_tables(std::map<SKey, double> s, std::map<SJointKey, double> s_joint,
                                             std::map<BKey, double> b, bool stratified) {
  SamplingWeights w;
  w.s_ = std::move(s);
  w.s_joint_ = std::move(s_joint);
  w.b_ = std::move(b);
  w.stratified_ = stratified;
  return w;
}

double SamplingWeights::pi_s(const Observation& o) const {
  if (o.weight_s) return *o.weight_s;
  const auto it = s_.find({o.z, o.y, o.x});
  if (it == s_.end() || !(it->second > 0.0)) {
    throw DesignError(fmt::format("no S sampling probability for stratum (z={}, y={}, x={})", o.z, o.y, o.x));
  }
  return it->second;
}

double SamplingWeights::pi_s_joint(const Observation& o) const {
  if (o.weight_s) return *o.weight_s;
  if (!stratified_) return pi_s(o);
  const auto it = s_joint_.find({o.z, o.y, o.x, o.delta_b() ? 1 : 0});
  if (it == s_joint_.end() || !(it->second > 0.0)) {
    throw DesignError(fmt::format("no S sampling probability for stratum (z={}, y={}, x={}, delta_b={})", o.z,
                                  o.y, o.x, o.delta_b() ? 1 : 0));
  }
  return it->second;
}

double SamplingWeights::pi_b(const Observation& o) const {
  if (o.weight_b) return *o.weight_b;
  const auto it = b_.find({o.z, o.x});
  if (it == b_.end() || !(it->second > 0.0)) {
    throw DesignError(fmt::format("no B sampling probability for stratum (z={}, x={})", o.z, o.x));
  }
  return it->second;
}

SamplingWeights estimate_sampling_weights(const Dataset& data, std::span<const double> eps, SamplingConfig config) {
  std::map<SamplingWeights::SKey, std::array<double, 2>> s;
  std::map<SamplingWeights::SJointKey, std::array<double, 2>> sj;
  std::map<SamplingWeights::BKey, std::array<double, 2>> b;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const auto& o = data.rows[i];
    const double w = weight_of(eps, i);
    auto& cs = s[{o.z, o.y, o.x}];
    cs[0] += w * (o.delta() ? 1.0 : 0.0);
    cs[1] += w;
    auto& cj = sj[{o.z, o.y, o.x, o.delta_b() ? 1 : 0}];
    cj[0] += w * (o.delta() ? 1.0 : 0.0);
    cj[1] += w;
    auto& cb = b[{o.z, o.x}];
    cb[0] += w * (o.delta_b() ? 1.0 : 0.0);
    cb[1] += w;
  }
  auto ratio = [](const auto& in) {
    std::map<typename std::decay_t<decltype(in)>::key_type, double> out;
    for (const auto& [k, v] : in) {
      if (v[1] > 0.0) out[k] = v[0] / v[1];
    }
    return out;
  };
  return SamplingWeights::from_tables(ratio(s), ratio(sj), ratio(b), config.stratify_s_by_delta_b);
}

// ---------------------------------------------------------------------------
// Nuisance regressions

CensoredNormalFit fit_b_given_x(const Dataset& data, const SamplingWeights& weights, std::span<const double> eps) {
  std::vector<double> resp, w;
  std::vector<int> xs;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const auto& o = data.rows[i];
    if (!o.delta_b()) continue;
    resp.push_back(*o.b);
    xs.push_back(o.x);
    w.push_back(weight_of(eps, i) / weights.pi_b(o));
  }
  if (resp.empty()) throw DesignError("F^{B|X}: no subjects with B measured");
  Eigen::MatrixXd design(static_cast<Eigen::Index>(resp.size()), data.levels);
  for (std::size_t i = 0; i < resp.size(); ++i) {
    design.row(static_cast<Eigen::Index>(i)) = baseline_design(xs[i], data.levels).transpose();
  }
  return fit_censored_normal(resp, design, w, data.limit);
}

namespace {

// Rows of the S-regression whose B sits at the limit, marginalised over B* < c.
struct CensoredCovariateRow {
  double s;
  int x;
  double weight;
};

}  // namespace

CensoredNormalFit fit_s_given_b(const Dataset& data, const SamplingWeights& weights,
                                const CensoredNormalModel& b_given_x, const Quadrature& quad,
                                std::span<const double> eps) {
  const double c = data.limit.c;
  const int levels = data.levels;
  std::vector<double> resp, w;
  std::vector<Eigen::VectorXd> rows;
  std::vector<CensoredCovariateRow> at_limit;
  std::vector<double> start_resp, start_w;
  std::vector<Eigen::VectorXd> start_rows;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const auto& o = data.rows[i];
    if (o.z != 1 || !o.delta() || !o.delta_b()) continue;
    const double wi = weight_of(eps, i) / weights.pi_s_joint(o);
    start_resp.push_back(*o.s);
    start_w.push_back(wi);
    start_rows.push_back(response_design(*o.b, o.x, levels));
    if (*o.b > c) {
      resp.push_back(*o.s);
      w.push_back(wi);
      rows.push_back(start_rows.back());
    } else {
      at_limit.push_back({*o.s, o.x, wi});
    }
  }
  if (start_resp.empty()) {
    throw DesignError("F^{S|B,X}: no vaccine recipients with both S and B measured");
  }
  const Eigen::Index p = levels + 1;
  Eigen::MatrixXd design(static_cast<Eigen::Index>(rows.size()), p);
  for (std::size_t i = 0; i < rows.size(); ++i) design.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();

  if (at_limit.empty()) return fit_censored_normal(resp, design, w, data.limit);

  bool any_uncensored = false;
  for (std::size_t i = 0; i < start_resp.size(); ++i) any_uncensored = any_uncensored || (start_resp[i] > c && start_w[i] > 0.0);
  if (!any_uncensored) throw NonIdentifiableError("F^{S|B,X}: every response is censored at the limit");

  // Per-level B* laws and their atoms below the limit.
  std::vector<double> mu_b(static_cast<std::size_t>(levels) + 1), log_below(static_cast<std::size_t>(levels) + 1);
  std::vector<std::vector<QuadAtom>> lower(static_cast<std::size_t>(levels) + 1);
  const double sd_b = b_given_x.sigma;
  for (int x = 1; x <= levels; ++x) {
    const auto ux = static_cast<std::size_t>(x);
    mu_b[ux] = baseline_mean(b_given_x, x);
    log_below[ux] = normal_log_cdf((c - mu_b[ux]) / sd_b);
    quad.truncated(mu_b[ux], sd_b, -std::numeric_limits<double>::infinity(), c, lower[ux]);
  }

  Eigen::MatrixXd start_design(static_cast<Eigen::Index>(start_rows.size()), p);
  for (std::size_t i = 0; i < start_rows.size(); ++i) {
    start_design.row(static_cast<Eigen::Index>(i)) = start_rows[i].transpose();
  }
  double sigma0 = 1.0;
  Eigen::VectorXd theta(p + 1);
  theta.head(p) = wls_start(start_resp, start_design, start_w, &sigma0);
  theta[p] = std::log(1.2 * sigma0);

  const Eigen::Index np = p + 1;
  if (np > 32) throw ValidationError("too many covariate levels for the S regression");

  auto loglik = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
    double ll = censored_normal_loglik(th, resp, design, w, c, grad);
    std::vector<double> terms_value;
    std::vector<AD> terms;
    for (const auto& r : at_limit) {
      const auto ux = static_cast<std::size_t>(r.x);
      AD alpha(th[0], np, 0);
      if (r.x > 1) alpha += AD(th[r.x], np, r.x);
      const AD gamma(th[1], np, 1);
      const AD log_sigma(th[p], np, p);
      const AD sigma = ad_exp(log_sigma);
      AD contrib;
      if (r.s > c) {
        const AD tau2 = sigma * sigma + gamma * gamma * (sd_b * sd_b);
        const AD tau = ad_sqrt(tau2);
        const AD resid = (r.s - alpha - gamma * mu_b[ux]) / tau;
        const AD m = (sigma * sigma * mu_b[ux] + gamma * (sd_b * sd_b) * (r.s - alpha)) / tau2;
        const AD sd_post = sigma * sd_b / tau;
        const AD q = (c - m) / sd_post;
        contrib = -0.5 * resid * resid - kLogSqrt2Pi - ad_log(tau) + ad_log_cdf(q) - log_below[ux];
      } else {
        // log sum_k w_k Phi((c - alpha - gamma b_k)/sigma) - log P(B* < c)
        terms.clear();
        terms_value.clear();
        for (const auto& atom : lower[ux]) {
          const AD a = (c - alpha - gamma * atom.value) / sigma;
          terms.push_back(ad_log_cdf(a) + std::log(atom.weight));
          terms_value.push_back(terms.back().value());
        }
        const double mx = *std::max_element(terms_value.begin(), terms_value.end());
        AD acc(0.0, ADVector::Zero(np));
        for (const auto& t : terms) acc += ad_exp(t - mx);
        contrib = ad_log(acc) + mx - log_below[ux];
      }
      ll += r.weight * contrib.value();
      if (grad) *grad += r.weight * Eigen::VectorXd(contrib.derivatives());
    }
    return ll;
  };

  Objective obj = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
    const double ll = loglik(th, grad);
    if (grad) *grad = -*grad;
    return -ll;
  };
  OptimOptions opts;
  opts.grad_tol = 1e-7;
  const OptimResult res = minimize_bfgs(obj, theta, opts);
  if (!res.converged && res.grad_norm() > 1e-6) {
    throw ConvergenceError(fmt::format("F^{{S|B,X}} fit did not converge: {} (gradient {:.3g})", res.message,
                                       res.grad_norm()),
                           res.trace);
  }
  CensoredNormalFit fit;
  fit.model.coefficients = res.x.head(p);
  fit.model.sigma = std::exp(res.x[p]);
  fit.model.limit = c;
  fit.diag = {res.iterations, res.grad_norm(), -res.value, true, res.message};
  return fit;
}

// ---------------------------------------------------------------------------
// Bayes inversion

double MixedConditional::continuous_mass() const {
  double m = 0.0;
  for (const auto& a : continuous) m += a.weight;
  return m;
}

double MixedConditional::density(double b) const {
  if (!(b > limit)) return 0.0;
  const double log_fb = normal_log_pdf((b - mu_b) / sd_b) - std::log(sd_b);
  const double mu_s = s_intercept + s_slope * b;
  const double log_fs = s > limit ? normal_log_pdf((s - mu_s) / sd_s) - std::log(sd_s)
                                  : normal_log_cdf((limit - mu_s) / sd_s);
  return std::exp(log_fb + log_fs - log_normalizer);
}

MixedConditional invert_to_b_given_s(const CensoredNormalModel& b_given_x, const CensoredNormalModel& s_given_b,
                                     double s, int x, const Quadrature& quad) {
  const double c = b_given_x.limit;
  if (s < c) throw ValidationError(fmt::format("invert_to_b_given_s: s={} below the limit {}", s, c));
  MixedConditional out;
  out.limit = c;
  out.s = s;
  out.mu_b = baseline_mean(b_given_x, x);
  out.sd_b = b_given_x.sigma;
  out.s_intercept = s_given_b.coefficients[0] + (x > 1 ? s_given_b.coefficients[x] : 0.0);
  out.s_slope = s_given_b.coefficients[1];
  out.sd_s = s_given_b.sigma;
  const double inf = std::numeric_limits<double>::infinity();

  if (s > c) {
    // Conjugate normal posterior of B* given S* = s.
    const double v_b = out.sd_b * out.sd_b;
    const double tau2 = out.sd_s * out.sd_s + out.s_slope * out.s_slope * v_b;
    const double tau = std::sqrt(tau2);
    const double m = (out.sd_s * out.sd_s * out.mu_b + out.s_slope * v_b * (s - out.s_intercept)) / tau2;
    const double sd_post = out.sd_s * out.sd_b / tau;
    out.log_normalizer = normal_log_pdf((s - out.s_intercept - out.s_slope * out.mu_b) / tau) - std::log(tau);
    if (!std::isfinite(out.log_normalizer)) {
      throw UnderflowError(fmt::format("f(s|x) underflows at s={}, x={}", s, x));
    }
    const double q = (c - m) / sd_post;
    out.point_mass = normal_cdf(q);
    quad.truncated(m, sd_post, c, inf, out.continuous);
    return out;
  }

  // s at the limit: likelihood Phi((c - alpha - gamma b*)/sigma_s) against the B* law.
  std::vector<QuadAtom> below, above;
  quad.truncated(out.mu_b, out.sd_b, -inf, c, below);
  quad.truncated(out.mu_b, out.sd_b, c, inf, above);
  std::vector<double> log_below, log_above;
  for (const auto& a : below) {
    log_below.push_back(std::log(a.weight) + normal_log_cdf((c - out.s_intercept - out.s_slope * a.value) / out.sd_s));
  }
  for (const auto& a : above) {
    log_above.push_back(std::log(a.weight) + normal_log_cdf((c - out.s_intercept - out.s_slope * a.value) / out.sd_s));
  }
  const double lb = log_sum_exp(log_below);
  const double la = log_sum_exp(log_above);
  const double terms[2] = {lb, la};
  out.log_normalizer = log_sum_exp(terms);
  if (!std::isfinite(out.log_normalizer)) {
    throw UnderflowError(fmt::format("P(S = c | x) underflows at x={}", x));
  }
  out.point_mass = std::exp(lb - out.log_normalizer);
  out.continuous.reserve(above.size());
  for (std::size_t k = 0; k < above.size(); ++k) {
    out.continuous.push_back({above[k].value, std::exp(log_above[k] - out.log_normalizer)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multinomial logit

void MultinomialModel::probabilities(double s, std::span<double> out) const {
  const double u = (s - center) / scale;
  out[0] = 0.0;
  double mx = 0.0;
  for (int j = 1; j < levels; ++j) {
    double eta = 0.0, pw = 1.0;
    for (int d = 0; d <= degree; ++d, pw *= u) eta += gamma(j - 1, d) * pw;
    out[static_cast<std::size_t>(j)] = eta;
    mx = std::max(mx, eta);
  }
  double total = 0.0;
  for (int j = 0; j < levels; ++j) {
    auto& v = out[static_cast<std::size_t>(j)];
    v = std::exp(v - mx);
    total += v;
  }
  for (int j = 0; j < levels; ++j) out[static_cast<std::size_t>(j)] /= total;
}

std::vector<double> MultinomialModel::probabilities(double s) const {
  std::vector<double> p(static_cast<std::size_t>(levels));
  probabilities(s, p);
  return p;
}

MultinomialFit fit_multinomial(std::span<const int> categories, std::span<const double> predictor,
                               std::span<const double> weights, int levels, int degree) {
  if (categories.size() != predictor.size() || categories.size() != weights.size()) {
    throw ValidationError("multinomial fit: inputs differ in length");
  }
  if (degree < 0) throw ValidationError("multinomial fit: negative degree");
  std::vector<double> level_weight(static_cast<std::size_t>(levels) + 1, 0.0);
  double wsum = 0.0, wmean = 0.0;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const int k = categories[i];
    if (k < 1 || k > levels) throw ValidationError("multinomial fit: category outside 1..D");
    level_weight[static_cast<std::size_t>(k)] += weights[i];
    wsum += weights[i];
    wmean += weights[i] * predictor[i];
  }
  int present = 0;
  for (int k = 1; k <= levels; ++k) present += level_weight[static_cast<std::size_t>(k)] > 0.0 ? 1 : 0;
  if (present < 2 && levels >= 2) throw DesignError("multinomial fit: fewer than 2 categories present");

  MultinomialFit fit;
  auto& model = fit.model;
  model.levels = levels;
  model.degree = degree;
  if (levels == 1) {
    model.gamma.resize(0, degree + 1);
    fit.diag.converged = true;
    return fit;
  }
  wmean /= wsum;
  double var = 0.0;
  for (std::size_t i = 0; i < categories.size(); ++i) var += weights[i] * (predictor[i] - wmean) * (predictor[i] - wmean);
  var /= wsum;
  model.center = degree > 0 ? wmean : 0.0;
  model.scale = degree > 0 && var > 0.0 ? std::sqrt(var) : 1.0;

  const int q = degree + 1;
  const int m = levels - 1;
  const std::size_t n = categories.size();
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(n), q);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (predictor[i] - model.center) / model.scale;
    double pw = 1.0;
    for (int d = 0; d < q; ++d, pw *= u) basis(static_cast<Eigen::Index>(i), d) = pw;
  }

  // Negative log-likelihood, gradient and Hessian in theta = vec(gamma) (row-major).
  const int np = m * q;
  std::vector<double> prob(static_cast<std::size_t>(m));
  auto evaluate = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
    if (grad) grad->setZero(np);
    if (hess) hess->setZero(np, np);
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = weights[i];
      if (w == 0.0) continue;
      const auto row = basis.row(static_cast<Eigen::Index>(i));
      double mx = 0.0;
      for (int j = 0; j < m; ++j) {
        double e = 0.0;
        for (int d = 0; d < q; ++d) e += th[j * q + d] * row[d];
        prob[static_cast<std::size_t>(j)] = e;
        mx = std::max(mx, e);
      }
      double total = std::exp(-mx);
      for (int j = 0; j < m; ++j) {
        auto& v = prob[static_cast<std::size_t>(j)];
        const double e = v;
        v = std::exp(e - mx);
        total += v;
      }
      const int k = categories[i];
      const double log_total = mx + std::log(total);
      ll += w * ((k >= 2 ? th.segment((k - 2) * q, q).dot(row.transpose()) : 0.0) - log_total);
      for (auto& v : prob) v /= total;
      if (grad) {
        for (int j = 0; j < m; ++j) {
          const double r = w * ((k == j + 2 ? 1.0 : 0.0) - prob[static_cast<std::size_t>(j)]);
          for (int d = 0; d < q; ++d) (*grad)[j * q + d] -= r * row[d];
        }
      }
      if (hess) {
        for (int j = 0; j < m; ++j) {
          for (int l = 0; l <= j; ++l) {
            const double pj = prob[static_cast<std::size_t>(j)], pl = prob[static_cast<std::size_t>(l)];
            const double c = w * ((j == l ? pj : 0.0) - pj * pl);
            for (int d = 0; d < q; ++d)
              for (int e = 0; e < q; ++e) (*hess)(j * q + d, l * q + e) += c * row[d] * row[e];
          }
        }
      }
    }
    if (hess) *hess = hess->selfadjointView<Eigen::Lower>();
    return -ll;
  };

  // Start at the empirical log odds.
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(np);
  const double ref = std::max(level_weight[1], 1e-3 * wsum / levels);
  for (int j = 0; j < m; ++j) {
    const double wj = std::max(level_weight[static_cast<std::size_t>(j) + 2], 1e-3 * wsum / levels);
    theta[j * q] = std::log(wj / ref);
  }

  // Damped Newton; the objective is convex.
  constexpr double kGradTol = 1e-8;
  Eigen::VectorXd grad(np);
  Eigen::MatrixXd hess(np, np);
  double value = evaluate(theta, &grad, &hess);
  int iterations = 0;
  bool converged = false;
  std::string message = "iteration limit reached";
  for (; iterations < 200; ++iterations) {
    if (grad.cwiseAbs().maxCoeff() <= kGradTol) {
      converged = true;
      message = "gradient tolerance reached";
      break;
    }
    if (theta.cwiseAbs().maxCoeff() > kSeparationCap) {
      message = "coefficients exceed the separation cap";
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess + 1e-10 * Eigen::MatrixXd::Identity(np, np));
    Eigen::VectorXd dir = ldlt.solve(-grad);
    if (!dir.allFinite() || grad.dot(dir) >= 0.0) dir = -grad;
    double step = 1.0;
    bool improved = false;
    Eigen::VectorXd cand(np), g2(np);
    for (int half = 0; half < 40; ++half, step *= 0.5) {
      cand = theta + step * dir;
      const double v = evaluate(cand, &g2, nullptr);
      if (std::isfinite(v) && v <= value + 1e-4 * step * grad.dot(dir)) {
        improved = true;
        break;
      }
      if (std::isfinite(v) && v <= value + 1e-13 * (1.0 + std::abs(value)) && g2.cwiseAbs().maxCoeff() < grad.cwiseAbs().maxCoeff()) {
        improved = true;
        break;
      }
    }
    if (!improved) {
      message = "line search failed";
      break;
    }
    theta = cand;
    value = evaluate(theta, &grad, &hess);
  }
  if (!converged && grad.cwiseAbs().maxCoeff() <= kGradTol) converged = true;

  model.gamma.resize(m, q);
  for (int j = 0; j < m; ++j)
    for (int d = 0; d < q; ++d) model.gamma(j, d) = theta[j * q + d];
  // Under separation the likelihood flattens out long before the cap, so a
  // large standardised coefficient is the signal.
  if (model.gamma.cwiseAbs().maxCoeff() > kSeparationWarn) {
    model.separation_warning = true;
    model.gamma = model.gamma.cwiseMax(-kSeparationCap).cwiseMin(kSeparationCap);
  } else if (!converged && grad.cwiseAbs().maxCoeff() > 1e-6) {
    throw ConvergenceError(fmt::format("multinomial fit did not converge: {} (gradient {:.3g})", message,
                                       grad.cwiseAbs().maxCoeff()));
  }
  fit.diag = {iterations, grad.cwiseAbs().maxCoeff(), -value, converged, message};
  return fit;
}

}  // namespace emcurve
