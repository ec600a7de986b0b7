#include "emcurve/montecarlo.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <ostream>
#include <thread>

#include <fmt/format.h>

#include "emcurve/errors.hpp"
#include "emcurve/random.hpp"

namespace emcurve {

CurveGrid population_grid(const SimConfig& config, std::size_t subjects, std::uint64_t seed) {
  const auto q = population_s_quantiles(config, {0.025, 0.975}, subjects, seed);
  return CurveGrid::linspace(q[0], q[1], kDefaultGridSize, {config.limit});
}

namespace {

std::uint64_t derived_seed(std::uint64_t master, std::uint64_t index, std::uint32_t purpose) {
  Rng rng = derive_stream(master, index, purpose);
  return rng();
}

const std::vector<double>& truth_of(const TrueCurves& t, CurveKind k, std::vector<double>& scratch) {
  if (k == CurveKind::Difference) {
    scratch = t.difference();
    return scratch;
  }
  return t[k];
}

}  // namespace

ReplicationResult run_replication(const SimConfig& config, std::uint64_t index, const CurveGrid& grid,
                                  const TrueCurves& truth, const MonteCarloOptions& options) {
  ReplicationResult r;
  try {
    const SimulatedTrial trial = simulate_trial(config, derived_seed(options.master_seed, index, kStreamTrial));
    const Dataset data = trial.dataset();
    AnalysisConfig analysis = options.analysis;
    analysis.beta.check_identifiability = false;
    const PipelineFit fit = fit_pipeline(data, analysis);
    const CurveSet est = pipeline_curves(fit, grid, analysis);
    EnsembleOptions eo;
    eo.draws = options.perturbations;
    eo.master_seed = derived_seed(options.master_seed, index, kStreamPerturbation);
    eo.threads = 1;
    const PerturbationEnsemble ens = run_ensemble(data, analysis, grid, fit.beta.beta_hat, eo);
    r.failed_draws = ens.failed_indices.size();
    std::vector<double> scratch;
    for (CurveKind k : kAllCurveKinds) {
      const auto ki = static_cast<std::size_t>(k);
      const CurveEstimate ce = summarize_curve(k, grid, est, ens, options.alpha);
      const auto& t = truth_of(truth, k, scratch);
      r.estimate[ki] = est.values(k);
      r.se[ki].assign(ce.se.data(), ce.se.data() + ce.se.size());
      r.q[ki] = ce.band.q;
      bool all = true;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        r.covered[ki].push_back(ce.ci[i].lo <= t[i] && t[i] <= ce.ci[i].hi);
        all = all && ce.band.limits[i].lo <= t[i] && t[i] <= ce.band.limits[i].hi;
      }
      r.band_covered[ki] = all;
    }
    const auto di = static_cast<std::size_t>(CurveKind::Difference);
    r.test = band_inversion_test(r.estimate[di], ens[CurveKind::Difference], ens.sd(CurveKind::Difference));
    r.ok = true;
  } catch (const Error& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

MonteCarloReport monte_carlo(const SimConfig& config, const CurveGrid& grid, const TrueCurves& truth,
                             const MonteCarloOptions& options) {
  if (options.replications < 2) throw ValidationError("monte_carlo needs at least 2 replications");
  const std::size_t n = options.replications;
  std::vector<ReplicationResult> results(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex m;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        results[i] = run_replication(config, i, grid, truth, options);
      } catch (...) {
        std::lock_guard lock(m);
        if (!fatal) fatal = std::current_exception();
        next = n;
        return;
      }
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);

  MonteCarloReport rep;
  rep.grid = grid.points();
  rep.alpha = options.alpha;
  rep.requested = n;
  const std::size_t g = grid.size();
  const double half = 0.5 * (1.0 - options.central_fraction) * (grid[g - 1] - grid[0]);
  for (std::size_t i = 0; i < g; ++i) {
    rep.central.push_back(grid[i] >= grid[0] + half - 1e-12 && grid[i] <= grid[g - 1] - half + 1e-12);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (results[i].ok) {
      ++rep.completed;
      rep.failed_draws += results[i].failed_draws;
    } else {
      rep.failed.push_back(i);
      rep.failure_messages.push_back(results[i].error);
    }
  }
  rep.warnings = truth.warnings;
  if (rep.completed < 10) rep.warnings.push_back(fmt::format("only {} replications: wide Monte Carlo error", rep.completed));
  std::vector<double> scratch;
  const double nc = static_cast<double>(rep.completed);
  std::size_t rejections = 0;
  for (CurveKind k : kAllCurveKinds) {
    const auto ki = static_cast<std::size_t>(k);
    rep.truth[ki] = truth_of(truth, k, scratch);
    rep.mean_estimate[ki].assign(g, 0.0);
    rep.mc_sd[ki].assign(g, 0.0);
    rep.mean_se[ki].assign(g, 0.0);
    rep.pointwise_cover[ki].assign(g, 0.0);
    double band = 0.0;
    for (const auto& r : results) {
      if (!r.ok) continue;
      for (std::size_t i = 0; i < g; ++i) {
        rep.mean_estimate[ki][i] += r.estimate[ki][i] / nc;
        rep.mean_se[ki][i] += r.se[ki][i] / nc;
        rep.pointwise_cover[ki][i] += r.covered[ki][i] / nc;
      }
      band += r.band_covered[ki] / nc;
    }
    for (const auto& r : results) {
      if (!r.ok) continue;
      for (std::size_t i = 0; i < g; ++i) {
        const double d = r.estimate[ki][i] - rep.mean_estimate[ki][i];
        rep.mc_sd[ki][i] += d * d;
      }
    }
    rep.bias[ki].resize(g);
    for (std::size_t i = 0; i < g; ++i) {
      rep.mc_sd[ki][i] = nc > 1 ? std::sqrt(rep.mc_sd[ki][i] / (nc - 1.0)) : 0.0;
      rep.bias[ki][i] = rep.mean_estimate[ki][i] - rep.truth[ki][i];
    }
    rep.simultaneous_cover[ki] = band;
  }
  for (const auto& r : results) rejections += r.ok && r.test.p_value < options.alpha ? 1 : 0;
  rep.rejection_rate = nc > 0 ? static_cast<double>(rejections) / nc : 0.0;
  rep.replications = std::move(results);
  if (static_cast<double>(rep.failed.size()) > options.max_failure_fraction * static_cast<double>(n)) {
    throw ConvergenceError(fmt::format("{} of {} Monte Carlo replications failed; first failure: {}", rep.failed.size(),
                                       n, rep.failure_messages.front()));
  }
  return rep;
}

void write_mc_points(std::ostream& out, const MonteCarloReport& rep) {
  out << "s,kind,truth,mean_est,bias,mc_sd,mean_se,pointwise_cover,central\n";
  for (CurveKind k : kAllCurveKinds) {
    const auto ki = static_cast<std::size_t>(k);
    for (std::size_t i = 0; i < rep.grid.size(); ++i) {
      out << fmt::format("{:.17g},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", rep.grid[i],
                         curve_kind_name(k), rep.truth[ki][i], rep.mean_estimate[ki][i], rep.bias[ki][i],
                         rep.mc_sd[ki][i], rep.mean_se[ki][i], rep.pointwise_cover[ki][i], rep.central[i] ? 1 : 0);
    }
  }
}

void write_mc_summary(std::ostream& out, const MonteCarloReport& rep) {
  out << "kind,simultaneous_cover,replications,failures\n";
  for (CurveKind k : kAllCurveKinds) {
    out << fmt::format("{},{:.17g},{},{}\n", curve_kind_name(k), rep.simultaneous_cover[static_cast<std::size_t>(k)],
                       rep.completed, rep.failed.size());
  }
}

void write_mc_tests(std::ostream& out, const MonteCarloReport& rep) {
  out << "replication,p_value,side,sup_stat,reject\n";
  for (std::size_t i = 0; i < rep.replications.size(); ++i) {
    const auto& r = rep.replications[i];
    if (!r.ok) continue;
    out << fmt::format("{},{:.17g},{},{:.17g},{}\n", i, r.test.p_value, r.test.side, r.test.sup_stat,
                       r.test.p_value < rep.alpha ? 1 : 0);
  }
}

}  // namespace emcurve
