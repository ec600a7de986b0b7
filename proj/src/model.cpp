#include "emcurve/model.hpp"

#include <cmath>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"

namespace emcurve {

Eigen::VectorXd RiskParams::to_vector() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(size()));
  v << beta0, beta1, beta2, beta3, beta4, beta5,
      Eigen::Map<const Eigen::VectorXd>(beta6.data(), static_cast<Eigen::Index>(beta6.size()));
  return v;
}

RiskParams RiskParams::from_vector(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() < 6) throw ValidationError("risk parameter vector needs at least 6 entries");
  RiskParams p;
  p.beta0 = v[0];
  p.beta1 = v[1];
  p.beta2 = v[2];
  p.beta3 = v[3];
  p.beta4 = v[4];
  p.beta5 = v[5];
  p.beta6.assign(v.data() + 6, v.data() + v.size());
  return p;
}

void RiskParams::validate(int levels) const {
  if (static_cast<int>(beta6.size()) != levels - 1) {
    throw ValidationError("beta6 must have " + std::to_string(levels - 1) + " entries, got " +
                          std::to_string(beta6.size()));
  }
  const Eigen::VectorXd v = to_vector();
  if (!v.allFinite()) throw ValidationError("risk parameters must be finite");
}

double risk(const RiskParams& params, int z, double s, double b, int x) {
  if (x < 1 || x > params.levels()) {
    throw ValidationError("covariate level " + std::to_string(x) + " outside 1.." +
                          std::to_string(params.levels()));
  }
  const double eta = params.linear_predictor(z, s, b, x);
  if (!std::isfinite(eta)) throw NumericDomainError("non-finite linear predictor");
  return normal_cdf(eta);
}

double Contrast::operator()(double r1, double r0) const {
  switch (kind) {
    case ContrastKind::Difference:
      return r1 - r0;
    case ContrastKind::VE:
      if (r0 == 0.0) throw NumericDomainError("VE contrast undefined for placebo risk 0");
      return 1.0 - r1 / r0;
    case ContrastKind::LogRatio:
      if (r0 == 0.0 || r1 == 0.0) throw NumericDomainError("log-ratio contrast undefined at risk 0");
      return std::log(r1) - std::log(r0);
  }
  return 0.0;
}

std::string Contrast::name() const {
  switch (kind) {
    case ContrastKind::VE:
      return "ve";
    case ContrastKind::Difference:
      return "difference";
    case ContrastKind::LogRatio:
      return "log-ratio";
  }
  return "ve";
}

Contrast Contrast::parse(const std::string& name) {
  if (name == "ve" || name == "VE") return {ContrastKind::VE};
  if (name == "difference") return {ContrastKind::Difference};
  if (name == "log-ratio" || name == "logratio") return {ContrastKind::LogRatio};
  throw ValidationError("unknown contrast '" + name + "'");
}

double contrast_eval(Contrast h, double r1, double r0) { return h(r1, r0); }

}  // namespace emcurve
