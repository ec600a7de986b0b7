// Acceptance run: one PASS/FAIL line per criterion, details below each line.
// Usage: acceptance <profile-dir> [criterion ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "cases.hpp"
#include "emcurve/curves.hpp"
#include "emcurve/estlik.hpp"
#include "emcurve/inference.hpp"
#include "emcurve/montecarlo.hpp"
#include "emcurve/pipeline.hpp"
#include "emcurve/simgen.hpp"
#include "integration_oracle.hpp"
#include "oracles.hpp"

using namespace emcurve;
namespace fs = std::filesystem;

namespace {

fs::path g_profiles;
unsigned g_threads = 1;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, std::string note) {
    pass = pass && ok;
    notes.push_back((ok ? "  ok   " : "  MISS ") + note);
  }
  void info(std::string note) { notes.push_back("       " + note); }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SimConfig profile(const std::string& name) { return read_sim_config_file((g_profiles / name).string()); }

NuisanceParams generating_nuisance(const SimConfig& cfg) {
  NuisanceParams nu;
  nu.b_given_x = {Eigen::Map<const Eigen::VectorXd>(cfg.b_coef.data(), 4), cfg.b_sd, cfg.limit};
  nu.s_given_b = {Eigen::Map<const Eigen::VectorXd>(cfg.s_coef.data(), 5), cfg.s_sd, cfg.limit};
  return nu;
}

double rel_err(double got, double ref) { return std::abs(got - ref) / std::max(std::abs(ref), 1e-300); }

// 1. Event rates and latent correlation of the shipped profile.
Outcome generator_fidelity() {
  Outcome o;
  const SimConfig cfg = profile("s3_bip.cfg");
  double rate0 = 0.0, rate1 = 0.0;
  std::array<std::array<double, 6>, 4> mom{};  // per x: n, sb, ss, sbb, sss, sbs
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    const SimulatedTrial t = simulate_trial(cfg, cfg.master_seed + static_cast<std::uint64_t>(r));
    std::array<double, 2> n{}, y{};
    for (const auto& s : t.subjects) {
      n[static_cast<std::size_t>(s.obs.z)] += 1;
      y[static_cast<std::size_t>(s.obs.z)] += s.obs.y;
      auto& m = mom[static_cast<std::size_t>(s.obs.x - 1)];
      m[0] += 1;
      m[1] += s.b_latent;
      m[2] += s.s_latent;
      m[3] += s.b_latent * s.b_latent;
      m[4] += s.s_latent * s.s_latent;
      m[5] += s.b_latent * s.s_latent;
    }
    rate0 += y[0] / n[0] / reps;
    rate1 += y[1] / n[1] / reps;
  }
  o.check(std::abs(rate0 - 0.04) <= 0.005, fmt::format("placebo rate {:.5f} (target 0.04 +- 0.005)", rate0));
  o.check(std::abs(rate1 - 0.02) <= 0.005, fmt::format("vaccine rate {:.5f} (target 0.02 +- 0.005)", rate1));
  for (std::size_t x = 0; x < mom.size(); ++x) {
    const auto& m = mom[x];
    const double n = m[0];
    const double cov = m[5] / n - m[1] / n * (m[2] / n);
    const double vb = m[3] / n - m[1] / n * (m[1] / n);
    const double vs = m[4] / n - m[2] / n * (m[2] / n);
    const double r = cov / std::sqrt(vb * vs);
    o.check(std::abs(r - 0.732) <= 0.03, fmt::format("x={} corr(S*,B*) {:.4f} (target 0.732 +- 0.03)", x + 1, r));
  }
  return o;
}

// 2. Without missingness the estimated likelihood is a probit likelihood.
Outcome complete_data() {
  Outcome o;
  const SimConfig cfg = profile("s3_bip.cfg");
  const SimulatedTrial t = simulate_trial(cfg, cfg.master_seed);
  std::vector<Observation> rows;
  for (const auto& s : t.subjects) {
    Observation ob = s.obs;
    ob.s = std::max(s.s_latent, cfg.limit);
    ob.b = std::max(s.b_latent, cfg.limit);
    rows.push_back(ob);
  }
  const Dataset data = validate_dataset(rows, DetectionLimit{cfg.limit}, 4).data;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.size()), 9);
  Eigen::VectorXd y(X.rows());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data.rows[i];
    auto row = X.row(static_cast<Eigen::Index>(i));
    row[0] = 1.0;
    row[1] = r.z;
    row[2] = *r.s;
    row[3] = r.z * *r.s;
    row[4] = *r.b;
    row[5] = r.z * *r.b;
    if (r.x > 1) row[6 + r.x - 2] = 1.0;
    y[static_cast<Eigen::Index>(i)] = r.y;
  }
  const Eigen::VectorXd ref = oracle::probit_irls(X, y, Eigen::VectorXd::Ones(X.rows()));
  const FitResult fit = fit_beta(data, generating_nuisance(cfg), Quadrature(40), default_init(data));
  const Eigen::VectorXd got = fit.beta_hat.to_vector();
  const double worst = (got - ref).lpNorm<Eigen::Infinity>();
  o.check(fit.converged, "optimizer converged");
  o.check(worst <= 1e-6, fmt::format("max |beta - probit| = {:.3g} (limit 1e-6)", worst));
  return o;
}

// 3. Branch likelihoods and stratum risks against Monte Carlo integration.
Outcome integration_oracle() {
  Outcome o;
  std::mt19937_64 rng(515);
  const Quadrature quad(40);
  std::array<double, 6> worst{};
  const char* names[] = {"(1,0) branch", "(0,1) branch", "(0,0) branch", "marginal", "B>c", "B=c"};
  const int configs = 50;
  for (int rep = 0; rep < configs; ++rep) {
    const cases::Case k = cases::random_case(rng);
    Observation ob;
    ob.z = k.z;
    ob.x = k.x;
    ob.y = 1;
    ob.b = cases::marker(rng, 0.3, 2.0);
    const double p10 = oracle::prob_given_b(k.laws, k.obeta, ob.z, 1, *ob.b, 1000, rng);
    worst[0] = std::max(worst[0], rel_err(std::exp(loglik_contribution(ob, k.beta, k.nuisance, quad)), p10));
    ob.b.reset();
    ob.s = cases::marker(rng, 0.2, 2.5);
    const double p01 = oracle::prob_given_s(k.laws, k.obeta, ob.z, 1, *ob.s, 1'000'000, rng);
    worst[1] = std::max(worst[1], rel_err(std::exp(loglik_contribution(ob, k.beta, k.nuisance, quad)), p01));
    ob.s.reset();
    const double p00 = oracle::prob_given_x(k.laws, k.obeta, ob.z, 1, 1000, rng);
    worst[2] = std::max(worst[2], rel_err(std::exp(loglik_contribution(ob, k.beta, k.nuisance, quad)), p00));

    const double s = cases::marker(rng, 0.15, 2.5);
    const std::array<std::pair<Stratum, oracle::Part>, 3> strata{{{Stratum::Marginal, oracle::Part::All},
                                                                  {Stratum::Seropositive, oracle::Part::Above},
                                                                  {Stratum::Seronegative, oracle::Part::Below}}};
    for (std::size_t j = 0; j < strata.size(); ++j) {
      const double got = risk_given_x(k.beta, k.nuisance, quad, k.z, s, k.x, strata[j].first);
      const double ref = oracle::risk_given_s(k.laws, k.obeta, k.z, s, strata[j].second, 1'000'000, rng);
      worst[3 + j] = std::max(worst[3 + j], rel_err(got, ref));
    }
  }
  for (std::size_t j = 0; j < worst.size(); ++j) {
    o.check(worst[j] <= 1e-3, fmt::format("{:13s} max rel err {:.3g} over {} configurations", names[j], worst[j], configs));
  }
  return o;
}

struct McRun {
  MonteCarloReport report;
  double seconds = 0.0;
};

McRun run_mc(const SimConfig& cfg, std::size_t replications, std::size_t perturbations) {
  const auto t0 = std::chrono::steady_clock::now();
  const CurveGrid grid = population_grid(cfg);
  const TrueCurves truth = true_curves(cfg, grid, Contrast{});
  MonteCarloOptions mo;
  mo.replications = replications;
  mo.perturbations = perturbations;
  mo.threads = g_threads;
  mo.master_seed = cfg.master_seed;
  McRun r{monte_carlo(cfg, grid, truth, mo), 0.0};
  r.seconds = seconds_since(t0);
  return r;
}

void judge_figure(Outcome& o, const McRun& run) {
  const MonteCarloReport& rep = run.report;
  o.info(fmt::format("{} of {} replications completed in {:.0f} s on {} thread(s)", rep.completed, rep.requested,
                     run.seconds, g_threads));
  for (CurveKind k : {CurveKind::Marginal, CurveKind::Seropositive, CurveKind::Seronegative}) {
    const auto ki = static_cast<std::size_t>(k);
    double bias = 0.0, lo = 1.0, hi = 0.0;
    std::size_t at = 0;
    for (std::size_t i = 0; i < rep.grid.size(); ++i) {
      lo = std::min(lo, rep.pointwise_cover[ki][i]);
      hi = std::max(hi, rep.pointwise_cover[ki][i]);
      if (rep.central[i] && std::abs(rep.bias[ki][i]) > bias) {
        bias = std::abs(rep.bias[ki][i]);
        at = i;
      }
    }
    const std::string name = curve_kind_name(k);
    o.check(bias <= 0.05, fmt::format("{:13s} max |bias| {:.4f} at s={:.3f} on the central 90% (limit 0.05)", name,
                                      bias, rep.grid[at]));
    o.check(lo >= 0.90 && hi <= 0.99, fmt::format("{:13s} pointwise coverage in [{:.2f}, {:.2f}] (need [0.90, 0.99])",
                                                  name, lo, hi));
    o.check(rep.simultaneous_cover[ki] >= 0.90,
            fmt::format("{:13s} simultaneous coverage {:.2f} (need >= 0.90)", name, rep.simultaneous_cover[ki]));
    for (std::size_t i = 0; i < rep.grid.size(); i += 10) {
      o.info(fmt::format("  s={:.3f} truth {:.4f} mean {:.4f} mc_sd {:.4f} mean_se {:.4f} cover {:.2f}", rep.grid[i],
                         rep.truth[ki][i], rep.mean_estimate[ki][i], rep.mc_sd[ki][i], rep.mean_se[ki][i],
                         rep.pointwise_cover[ki][i]));
    }
  }
}

// 4. BIP-only Figure 1 analogue, plus the timed smoke profile.
Outcome figure_bip() {
  Outcome o;
  const McRun smoke = run_mc(profile("smoke_bip.cfg"), 50, 100);
  o.check(smoke.seconds <= 3600.0, fmt::format("smoke profile (N=4000, 50 reps) took {:.0f} s (limit 3600)", smoke.seconds));
  const McRun run = run_mc(profile("s3_bip.cfg"), 100, 100);
  o.check(run.seconds <= 8.0 * 3600.0 * 8.0 / std::max(1u, std::min(g_threads, 8u)),
          fmt::format("full run {:.0f} s (budget 8 h on 8 cores)", run.seconds));
  judge_figure(o, run);
  return o;
}

// 5. BIP+CPV Figure 2 analogue.
Outcome figure_cpv() {
  Outcome o;
  const McRun run = run_mc(profile("s3_bip_cpv.cfg"), 100, 100);
  judge_figure(o, run);
  return o;
}

// 6. Size and power of the band-inversion test.
Outcome test_calibration() {
  Outcome o;
  const McRun null = run_mc(profile("null_b.cfg"), 100, 100);
  o.check(null.report.rejection_rate <= 0.10,
          fmt::format("null (beta4 = beta5 = 0) rejection rate {:.2f} (limit 0.10), {:.0f} s",
                      null.report.rejection_rate, null.seconds));
  const McRun power = run_mc(profile("power_b.cfg"), 100, 100);
  o.check(power.report.rejection_rate >= 0.80,
          fmt::format("beta4 = -0.8 rejection rate {:.2f} (need 0.80), {:.0f} s", power.report.rejection_rate,
                      power.seconds));
  return o;
}

bool bitwise_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// 7. Property suites.
Outcome properties() {
  Outcome o;
  std::mt19937_64 rng(707);
  const Quadrature quad(40);

  double mix = 0.0, mass = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const cases::Case k = cases::random_case(rng);
    const double s = cases::marker(rng, 0.1, 3.0);
    const MixedConditional mc = invert_to_b_given_s(k.nuisance.b_given_x, k.nuisance.s_given_b, s, k.x, quad);
    mass = std::max(mass, std::abs(mc.point_mass + mc.continuous_mass() - 1.0));
    const double w0 = mc.point_mass;
    if (w0 < kEmptyStratumMass || 1.0 - w0 < kEmptyStratumMass) continue;
    for (int z : {0, 1}) {
      const double m = risk_given_x(k.beta, mc, z, k.x, Stratum::Marginal);
      const double pos = risk_given_x(k.beta, mc, z, k.x, Stratum::Seropositive);
      const double neg = risk_given_x(k.beta, mc, z, k.x, Stratum::Seronegative);
      mix = std::max(mix, std::abs(m - (w0 * neg + (1.0 - w0) * pos)) / m);
    }
  }
  const double eps = std::numeric_limits<double>::epsilon();
  o.check(mix <= 8 * eps, fmt::format("mixture identity max rel err {:.3g} ({:.1f} ulp)", mix, mix / eps));
  o.check(mass <= 1e-8, fmt::format("MixedConditional |mass - 1| max {:.3g} (limit 1e-8)", mass));

  const SimConfig cfg = profile("s3_bip_cpv.cfg");
  SimConfig small = cfg;
  small.n_subjects = 3000;
  const Dataset data = simulate_trial(small, 12).dataset();
  const EstimatedLikelihood lik(data, generating_nuisance(cfg), Quadrature(30));
  std::normal_distribution<double> nd;
  double fd_worst = 0.0;
  for (int point = 0; point < 5; ++point) {
    Eigen::VectorXd beta = cfg.beta.to_vector();
    for (Eigen::Index k = 0; k < beta.size(); ++k) beta[k] += 0.2 * nd(rng);
    Eigen::VectorXd grad, scratch;
    lik(beta, &grad);
    for (Eigen::Index k = 0; k < beta.size(); ++k) {
      const double h = 1e-5;
      Eigen::VectorXd bp = beta, bm = beta;
      bp[k] += h;
      bm[k] -= h;
      const double fd = (lik(bp, &scratch) - lik(bm, &scratch)) / (2 * h);
      fd_worst = std::max(fd_worst, std::abs(grad[k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  o.check(fd_worst <= 1e-5, fmt::format("score vs central differences max rel err {:.3g} (limit 1e-5)", fd_worst));

  const SimConfig s3 = profile("s3_bip.cfg");
  const Dataset trial = simulate_trial(s3, s3.master_seed).dataset();
  AnalysisConfig a40, a80;
  a40.quad_nodes = 40;
  a80.quad_nodes = 80;
  const PipelineFit f40 = fit_pipeline(trial, a40);
  const double shift = (f40.beta.beta_hat.to_vector() - fit_pipeline(trial, a80).beta.beta_hat.to_vector())
                           .lpNorm<Eigen::Infinity>();
  o.check(shift <= 1e-4, fmt::format("quadrature 40 -> 80 moves beta by {:.3g} (limit 1e-4)", shift));

  const CurveGrid grid = default_grid(trial);
  EnsembleOptions one, many;
  one.draws = many.draws = 8;
  one.master_seed = many.master_seed = 4242;
  one.threads = 1;
  many.threads = 4;
  const auto a = run_ensemble(trial, a40, grid, f40.beta.beta_hat, one);
  const auto b = run_ensemble(trial, a40, grid, f40.beta.beta_hat, many);
  bool same = a.draw_indices == b.draw_indices;
  for (CurveKind k : kAllCurveKinds) same = same && bitwise_equal(a[k], b[k]);

  SimConfig mc_cfg = profile("smoke_bip.cfg");
  const CurveGrid mc_grid = population_grid(mc_cfg, 200'000);
  OracleOptions oo;
  oo.subjects = 200'000;
  const TrueCurves truth = true_curves(mc_cfg, mc_grid, Contrast{}, oo);
  MonteCarloOptions m1, m3;
  m1.replications = m3.replications = 3;
  m1.perturbations = m3.perturbations = 20;
  m1.threads = 1;
  m3.threads = 3;
  const auto r1 = monte_carlo(mc_cfg, mc_grid, truth, m1);
  const auto r3 = monte_carlo(mc_cfg, mc_grid, truth, m3);
  for (std::size_t k = 0; k < 4; ++k) same = same && r1.mean_estimate[k] == r3.mean_estimate[k] && r1.mean_se[k] == r3.mean_se[k];
  same = same && r1.rejection_rate == r3.rejection_rate;
  o.check(same, "perturbation ensemble (1 vs 4 threads) and Monte Carlo (1 vs 3 threads) agree byte for byte");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <profile-dir> [criterion ...]\n";
    return 2;
  }
  g_profiles = argv[1];
  g_threads = std::max(1u, std::thread::hardware_concurrency());
  std::set<int> wanted;
  for (int i = 2; i < argc; ++i) wanted.insert(std::stoi(argv[i]));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"generator fidelity", generator_fidelity},
      {"complete-data reduction", complete_data},
      {"integration oracle", integration_oracle},
      {"Figure 1 analogue (BIP)", figure_bip},
      {"Figure 2 analogue (BIP+CPV)", figure_cpv},
      {"test calibration", test_calibration},
      {"property suites", properties},
  };
  bool all = true;
  std::vector<std::string> summary;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("error: ") + e.what());
    }
    const std::string line =
        fmt::format("criterion {}: {} {} ({:.0f} s)", id, o.pass ? "PASS" : "FAIL", criteria[i].first, seconds_since(t0));
    std::cout << line << "\n";
    for (const auto& n : o.notes) std::cout << n << "\n";
    std::cout.flush();
    summary.push_back(line);
    all = all && o.pass;
  }
  std::cout << "\nsummary\n";
  for (const auto& s : summary) std::cout << s << "\n";
  return all ? 0 : 1;
}
