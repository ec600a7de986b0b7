#include "emcurve/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include <boost/random/exponential_distribution.hpp>
#include <fmt/format.h>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"
#include "emcurve/random.hpp"

namespace emcurve {

PerturbationDraw make_draw(std::uint64_t master_seed, std::uint64_t index, std::size_t n) {
  PerturbationDraw d;
  d.seed = master_seed;
  d.index = index;
  d.epsilon.resize(n);
  Rng rng = derive_stream(master_seed, index, kStreamPerturbation);
  boost::random::exponential_distribution<double> expo(1.0);
  double sum = 0.0;
  for (auto& e : d.epsilon) {
    do {
      e = expo(rng);
    } while (!(e > 0.0));
    sum += e;
  }
  if (n > 0 && std::abs(sum / static_cast<double>(n) - 1.0) > 5.0 / std::sqrt(static_cast<double>(n))) {
    throw NumericDomainError(fmt::format("perturbation draw {} has mean {} far from 1", index, sum / n));
  }
  return d;
}

Eigen::VectorXd PerturbationEnsemble::sd(CurveKind k) const {
  const Eigen::MatrixXd& m = (*this)[k];
  if (m.rows() < 2) throw ValidationError("standard deviations need at least two successful draws");
  const Eigen::RowVectorXd mean = m.colwise().mean();
  Eigen::VectorXd out(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    out[j] = std::sqrt((m.col(j).array() - mean[j]).square().sum() / static_cast<double>(m.rows() - 1));
  }
  return out;
}

CurveSet perturbed_refit(const Dataset& data, const PerturbationDraw& draw, const AnalysisConfig& config,
                         const CurveGrid& grid, const RiskParams& warm_start) {
  AnalysisConfig cfg = config;
  cfg.beta.check_identifiability = false;
  const PipelineFit fit = fit_pipeline(data, cfg, draw.epsilon, &warm_start);
  return pipeline_curves(fit, grid, cfg);
}

PerturbationEnsemble run_ensemble(const Dataset& data, const AnalysisConfig& config, const CurveGrid& grid,
                                  const RiskParams& warm_start, const EnsembleOptions& options) {
  const std::size_t b = options.draws;
  struct Slot {
    bool ok = false;
    CurveSet curves;
    std::string error;
  };
  std::vector<Slot> slots(b);
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= b) return;
      try {
        const PerturbationDraw draw = make_draw(options.master_seed, i, data.size());
        slots[i].curves = perturbed_refit(data, draw, config, grid, warm_start);
        slots[i].ok = true;
      } catch (const Error& e) {
        slots[i].error = e.what();
      } catch (...) {
        std::lock_guard lock(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
        next = b;
        return;
      }
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(std::max<std::size_t>(b, 1))));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);

  PerturbationEnsemble ens;
  ens.grid = grid;
  ens.requested = b;
  for (std::size_t i = 0; i < b; ++i) {
    if (slots[i].ok) {
      ens.draw_indices.push_back(i);
    } else {
      ens.failed_indices.push_back(i);
      ens.failure_messages.push_back(slots[i].error);
    }
  }
  if (static_cast<double>(ens.failed_indices.size()) > options.max_failure_fraction * static_cast<double>(b)) {
    throw ConvergenceError(fmt::format("{} of {} perturbation draws failed (limit {:.0f}%); first failure: {}",
                                       ens.failed_indices.size(), b, 100.0 * options.max_failure_fraction,
                                       ens.failure_messages.front()));
  }
  const auto g = static_cast<Eigen::Index>(grid.size());
  for (CurveKind k : kAllCurveKinds) {
    auto& m = ens.values[static_cast<std::size_t>(k)];
    m.resize(static_cast<Eigen::Index>(ens.draw_indices.size()), g);
    for (std::size_t r = 0; r < ens.draw_indices.size(); ++r) {
      const auto& curve = slots[ens.draw_indices[r]].curves[k];
      for (Eigen::Index j = 0; j < g; ++j) m(static_cast<Eigen::Index>(r), j) = curve[static_cast<std::size_t>(j)].value;
    }
  }
  return ens;
}

std::vector<Interval> pointwise_ci(const std::vector<double>& estimate, const Eigen::VectorXd& se, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in (0, 1]");
  if (static_cast<Eigen::Index>(estimate.size()) != se.size()) throw ValidationError("estimate and SE lengths differ");
  const double z = alpha >= 1.0 ? 0.0 : normal_quantile(1.0 - alpha / 2.0);
  std::vector<Interval> out(estimate.size());
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double s = se[static_cast<Eigen::Index>(i)];
    if (!(s > 0.0)) throw NumericDomainError(fmt::format("non-positive standard error at grid point {}", i + 1));
    out[i] = {estimate[i] - z * s, estimate[i] + z * s};
  }
  return out;
}

std::vector<double> sup_statistics(const std::vector<double>& estimate, const Eigen::MatrixXd& draws,
                                   const Eigen::VectorXd& se) {
  if (draws.cols() != se.size() || static_cast<Eigen::Index>(estimate.size()) != se.size()) {
    throw ValidationError("ensemble, estimate and SE lengths differ");
  }
  std::vector<double> out(static_cast<std::size_t>(draws.rows()), 0.0);
  for (Eigen::Index r = 0; r < draws.rows(); ++r) {
    double m = 0.0;
    for (Eigen::Index j = 0; j < draws.cols(); ++j) {
      if (!(se[j] > 0.0)) continue;
      m = std::max(m, std::abs((draws(r, j) - estimate[static_cast<std::size_t>(j)]) / se[j]));
    }
    out[static_cast<std::size_t>(r)] = m;
  }
  return out;
}

double ecdf_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("quantile of an empty ensemble");
  const auto n = values.size();
  const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
  if (k == 0) return 0.0;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(std::min(k, n) - 1), values.end());
  return values[std::min(k, n) - 1];
}

BandResult simultaneous_band(const std::vector<double>& estimate, const Eigen::MatrixXd& draws,
                             const Eigen::VectorXd& se, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  const auto b = static_cast<std::size_t>(draws.rows());
  if (b < kMinBandDraws) {
    throw ValidationError(fmt::format("simultaneous band needs at least {} draws, got {}", kMinBandDraws, b));
  }
  BandResult res;
  res.alpha = alpha;
  if (b < kRecommendedBandDraws) {
    res.warning = fmt::format("only {} perturbation draws; {} or more are recommended for bands", b,
                              kRecommendedBandDraws);
  }
  res.sup_statistics = sup_statistics(estimate, draws, se);
  res.q = ecdf_quantile(res.sup_statistics, 1.0 - alpha);
  res.limits.resize(estimate.size());
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double s = se[static_cast<Eigen::Index>(i)];
    res.limits[i] = {estimate[i] - res.q * s, estimate[i] + res.q * s};
  }
  return res;
}

TestResult band_inversion_test(const std::vector<double>& d, const Eigen::MatrixXd& draws, const Eigen::VectorXd& se) {
  const std::vector<double> sups = sup_statistics(d, draws, se);
  if (sups.empty()) throw ValidationError("band inversion needs a non-empty ensemble");
  double t1 = 0.0, t2 = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double s = se[static_cast<Eigen::Index>(i)];
    if (!(s > 0.0)) continue;
    const double t = d[i] / s;
    t1 = any ? std::max(t1, -t) : -t;
    t2 = any ? std::max(t2, t) : t;
    any = true;
  }
  if (!any) throw NumericDomainError("band inversion: every standard error is zero");
  auto exceed = [&](double t) {
    std::size_t k = 0;
    for (double v : sups) k += v > t ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(sups.size());
  };
  TestResult r;
  r.alpha1 = exceed(t1);
  r.alpha2 = exceed(t2);
  // The side whose statistic is larger is the one whose band constraint holds.
  r.side = t1 >= t2 ? 1 : 2;
  r.p_value = r.side == 1 ? r.alpha1 : r.alpha2;
  r.sup_stat = std::max(t1, t2);
  return r;
}

CurveEstimate summarize_curve(CurveKind kind, const CurveGrid& grid, const CurveSet& estimate,
                              const PerturbationEnsemble& ensemble, double alpha) {
  CurveEstimate out;
  out.kind = kind;
  out.grid = grid.points();
  out.points = estimate[kind];
  out.se = ensemble.sd(kind);
  const std::vector<double> est = estimate.values(kind);
  out.ci = pointwise_ci(est, out.se, alpha);
  out.band = simultaneous_band(est, ensemble[kind], out.se, alpha);
  return out;
}

}  // namespace emcurve
