#pragma once

#include <span>

#include "emcurve/curves.hpp"
#include "emcurve/dataset.hpp"
#include "emcurve/estlik.hpp"
#include "emcurve/nuisance.hpp"

namespace emcurve {

struct AnalysisConfig {
  int quad_nodes = 40;
  /// Polynomial degree in s of the P(X | .) models.
  int multinomial_degree = 1;
  /// Below this many rows P(X | S, B = c) is intercept-only.
  std::size_t small_seronegative = 50;
  SamplingConfig sampling;
  Contrast contrast;
  BetaFitOptions beta;
};

/// Every model fitted from one (possibly perturbed) dataset.
struct PipelineFit {
  SamplingWeights weights;
  CensoredNormalFit b_given_x;
  CensoredNormalFit s_given_b;
  NuisanceParams nuisance;
  MultinomialFit px_marginal;
  MultinomialFit px_seropositive;
  MultinomialFit px_seronegative;
  FitResult beta;

  CovariateModels covariates() const {
    return {px_marginal.model, px_seropositive.model, px_seronegative.model};
  }
};

/// Fits pi, F^{B|X}, F^{S|B,X}, the P(X | .) models and beta, with `eps`
/// multiplying every subject-level term. `warm_start` replaces the default
/// initial beta when given.
PipelineFit fit_pipeline(const Dataset& data, const AnalysisConfig& config, std::span<const double> eps = {},
                         const RiskParams* warm_start = nullptr);

CurveSet pipeline_curves(const PipelineFit& fit, const CurveGrid& grid, const AnalysisConfig& config);

}  // namespace emcurve
