#include "emcurve/pipeline.hpp"

#include "emcurve/errors.hpp"

namespace emcurve {

namespace {

double weight_at(std::span<const double> eps, std::size_t i) { return eps.empty() ? 1.0 : eps[i]; }

}  // namespace

PipelineFit fit_pipeline(const Dataset& data, const AnalysisConfig& config, std::span<const double> eps,
                         const RiskParams* warm_start) {
  if (!eps.empty() && eps.size() != data.rows.size()) {
    throw ValidationError("perturbation weights do not match the dataset size");
  }
  const Quadrature quad(config.quad_nodes);
  const double c = data.limit.c;
  PipelineFit fit;
  fit.weights = estimate_sampling_weights(data, eps, config.sampling);
  fit.b_given_x = fit_b_given_x(data, fit.weights, eps);
  fit.s_given_b = fit_s_given_b(data, fit.weights, fit.b_given_x.model, quad, eps);
  fit.nuisance = {fit.b_given_x.model, fit.s_given_b.model};

  // Covariate laws among vaccine recipients, inverse-probability weighted.
  std::vector<int> xm, xp, xn;
  std::vector<double> sm, sp, sn, wm, wp, wn;
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const auto& o = data.rows[i];
    if (o.z != 1 || !o.delta()) continue;
    const double e = weight_at(eps, i);
    xm.push_back(o.x);
    sm.push_back(*o.s);
    wm.push_back(e / fit.weights.pi_s(o));
    if (!o.delta_b()) continue;
    const double w = e / (fit.weights.pi_b(o) * fit.weights.pi_s_joint(o));
    if (*o.b > c) {
      xp.push_back(o.x);
      sp.push_back(*o.s);
      wp.push_back(w);
    } else {
      xn.push_back(o.x);
      sn.push_back(*o.s);
      wn.push_back(w);
    }
  }
  if (xn.empty()) throw DesignError("no vaccine recipients with S measured and B at the detection limit");
  if (xp.empty()) throw DesignError("no vaccine recipients with S measured and B above the detection limit");
  const int deg = config.multinomial_degree;
  fit.px_marginal = fit_multinomial(xm, sm, wm, data.levels, deg);
  fit.px_seropositive = fit_multinomial(xp, sp, wp, data.levels, deg);
  fit.px_seronegative = fit_multinomial(xn, sn, wn, data.levels, xn.size() < config.small_seronegative ? 0 : deg);

  const RiskParams init = warm_start ? *warm_start : default_init(data);
  fit.beta = fit_beta(data, fit.nuisance, quad, init, eps, config.beta);
  return fit;
}

CurveSet pipeline_curves(const PipelineFit& fit, const CurveGrid& grid, const AnalysisConfig& config) {
  const Quadrature quad(config.quad_nodes);
  return evaluate_curves(fit.beta.beta_hat, fit.nuisance, fit.covariates(), grid, config.contrast, quad);
}

}  // namespace emcurve
