#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "emcurve/artifacts.hpp"
#include "emcurve/errors.hpp"
#include "emcurve/inference.hpp"
#include "emcurve/montecarlo.hpp"
#include "emcurve/pipeline.hpp"
#include "emcurve/simgen.hpp"

namespace emcurve::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string full(double v) { return fmt::format("{:.17g}", v); }
std::string six(double v) { return fmt::format("{:.6g}", v); }

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Collects what a command read and wrote; written last as manifest.json.
class Run {
 public:
  Run(std::string command, const std::vector<std::string>& args, const std::string& out_dir)
      : dir_(out_dir) {
    if (dir_.empty()) throw ValidationError("--out is required");
    fs::create_directories(dir_);
    manifest_["command"] = std::move(command);
    manifest_["arguments"] = args;
    manifest_["version"] = kArtifactVersion;
    manifest_["inputs"] = json::array();
    manifest_["outputs"] = json::array();
  }

  json& manifest() { return manifest_; }

  void input(const std::string& path) {
    manifest_["inputs"].push_back({{"path", path}, {"sha256", sha256_file(path)}});
  }

  void output(const std::string& name, const std::string& content) {
    write_raw(name, content);
    manifest_["outputs"].push_back({{"path", name}, {"sha256", sha256_hex(content)}});
  }

  // Not part of the reproducible record.
  void write_raw(const std::string& name, const std::string& content) const {
    const fs::path p = fs::path(dir_) / name;
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ValidationError(fmt::format("cannot write '{}'", p.string()));
    f << content;
    if (!f) throw ValidationError(fmt::format("failed writing '{}'", p.string()));
  }

  void finish() { output_manifest(); }

 private:
  void output_manifest() { write_raw("manifest.json", manifest_.dump(2) + "\n"); }

  std::string dir_;
  json manifest_;
};

std::string seed_line(std::uint64_t seed) { return fmt::format("# master_seed={}\n", seed); }

CurveGrid parse_grid(const std::string& spec, const Dataset* data, DetectionLimit limit) {
  if (spec.empty() || spec == "default") {
    if (!data) throw ValidationError("--grid default needs a dataset");
    return default_grid(*data);
  }
  auto numbers = [&](char sep) {
    std::vector<double> v;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, sep)) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || item.find_first_not_of(" ", used) != std::string::npos) {
        throw ValidationError(fmt::format("--grid: '{}' is not a number", item));
      }
      v.push_back(x);
    }
    return v;
  };
  if (spec.find(':') != std::string::npos) {
    const auto v = numbers(':');
    if (v.size() != 3 || v[2] < 1 || v[2] != std::floor(v[2])) {
      throw ValidationError("--grid expects lo:hi:n, a comma list or 'default'");
    }
    return CurveGrid::linspace(v[0], v[1], static_cast<std::size_t>(v[2]), limit);
  }
  return CurveGrid(numbers(','), limit);
}

std::string sim_config_text(const SimConfig& c) {
  std::ostringstream ss;
  write_sim_config(ss, c);
  return ss.str();
}

SimConfig load_profile(const std::string& path, const std::optional<std::uint64_t>& seed,
                       const std::string& design) {
  SimConfig c = read_sim_config_file(path);
  if (seed) c.master_seed = *seed;
  if (!design.empty()) c.design = parse_design(design);
  c.validate();
  return c;
}

int cmd_simulate(const std::vector<std::string>& args, const std::string& config_path,
                 const std::optional<std::uint64_t>& seed, const std::string& design, const std::string& out_dir,
                 std::ostream& out) {
  const SimConfig cfg = load_profile(config_path, seed, design);
  Run run("simulate", args, out_dir);
  run.input(config_path);
  run.manifest()["master_seed"] = cfg.master_seed;
  run.manifest()["config"] = sim_config_text(cfg);

  const SimulatedTrial trial = simulate_trial(cfg, cfg.master_seed);
  const auto rows = trial.observations();
  std::ostringstream data;
  write_observations(data, rows);
  run.output("data.csv", data.str());
  run.output("config.cfg", sim_config_text(cfg));
  run.finish();

  std::array<std::size_t, 2> arm{}, events{};
  std::array<std::size_t, 4> pattern{};
  for (const auto& o : rows) {
    ++arm[static_cast<std::size_t>(o.z)];
    events[static_cast<std::size_t>(o.z)] += static_cast<std::size_t>(o.y);
    ++pattern[(o.delta_b() ? 2u : 0u) + (o.delta() ? 1u : 0u)];
  }
  out << seed_line(cfg.master_seed);
  out << fmt::format("design {}  subjects {}  vaccine {}  placebo {}\n", design_name(cfg.design), rows.size(),
                     arm[1], arm[0]);
  out << fmt::format("event rate  vaccine {}  placebo {}\n", six(events[1] / double(std::max<std::size_t>(arm[1], 1))),
                     six(events[0] / double(std::max<std::size_t>(arm[0], 1))));
  out << fmt::format("(delta_b,delta)  (0,0) {}  (0,1) {}  (1,0) {}  (1,1) {}\n", pattern[0], pattern[1],
                     pattern[2], pattern[3]);
  return 0;
}

int cmd_fit(const std::vector<std::string>& args, const std::string& data_path, double limit, int levels,
            int quad_nodes, int degree, bool no_stratify, const std::string& out_dir, std::ostream& out,
            std::ostream& err) {
  const auto validated = validate_dataset(read_observations_file(data_path), DetectionLimit{limit}, levels);
  const Dataset& data = validated.data;
  AnalysisConfig ac;
  ac.quad_nodes = quad_nodes;
  ac.multinomial_degree = degree;
  ac.sampling.stratify_s_by_delta_b = !no_stratify;

  PipelineFit fit;
  try {
    fit = fit_pipeline(data, ac);
  } catch (const Error& e) {
    const auto& r = validated.report;
    err << fmt::format("fit failed on {} subjects (vaccine {}, placebo {}; (delta_b,delta) 00={} 01={} 10={} 11={})\n",
                       data.size(), r.arm_counts[1], r.arm_counts[0], r.pattern(false, false), r.pattern(false, true),
                       r.pattern(true, false), r.pattern(true, true));
    throw;
  }

  Run run("fit", args, out_dir);
  run.input(data_path);
  run.manifest()["master_seed"] = nullptr;
  run.manifest()["config"] = {{"limit", limit},
                              {"levels", data.levels},
                              {"quad_nodes", quad_nodes},
                              {"multinomial_degree", degree},
                              {"stratify_s_by_delta_b", !no_stratify}};
  const std::string digest = run.manifest()["inputs"][0]["sha256"];
  std::ostringstream ss;
  ss << "# fitted risk, nuisance and covariate models\n";
  fit_to_block(fit, data, ac, digest).write(ss);
  run.output("fit.txt", ss.str());
  run.finish();

  const auto& f = fit.beta;
  out << fmt::format("subjects {}  excluded early events {}\n", data.size(), validated.report.excluded_early.size());
  out << fmt::format("branch terms  (0,0) {}  (0,1) {}  (1,0) {}  (1,1) {}\n", f.branch_counts[0],
                     f.branch_counts[1], f.branch_counts[2], f.branch_counts[3]);
  out << fmt::format("log-likelihood {}  iterations {}  gradient {}  clamped terms {}\n", six(f.log_likelihood),
                     f.iterations, six(f.grad_norm), f.clamp_count);
  const Eigen::VectorXd b = f.beta_hat.to_vector();
  out << "beta";
  for (Eigen::Index i = 0; i < b.size(); ++i) out << ' ' << six(b[i]);
  out << "\n";
  if (f.identifiability_warning) {
    err << fmt::format("warning: information matrix condition number {} exceeds the limit\n",
                       six(f.hessian_condition));
  }
  for (const auto* m : {&fit.px_marginal.model, &fit.px_seropositive.model, &fit.px_seronegative.model}) {
    if (m->separation_warning) err << "warning: quasi-separation in a P(X | S) model; coefficients capped\n";
  }
  return 0;
}

int cmd_curves(const std::vector<std::string>& args, const std::string& fit_path, const std::string& data_path,
               const std::string& grid_spec, double alpha, std::size_t perturbations,
               const std::optional<std::uint64_t>& seed, const std::string& contrast, unsigned threads,
               const std::string& out_dir, std::ostream& out, std::ostream& err) {
  std::ifstream fin(fit_path);
  if (!fin) throw ValidationError(fmt::format("cannot open fit artifact '{}'", fit_path));
  const FitArtifact a = fit_from_block(KeyValueBlock::read(fin));
  const std::string digest = sha256_file(data_path);
  if (digest != a.dataset_sha256) {
    throw ValidationError(fmt::format("fit artifact '{}' is stale: it was fitted to dataset {} but '{}' has digest {}",
                                      fit_path, a.dataset_sha256, data_path, digest));
  }
  if (perturbations > 0 && !seed) throw ValidationError("--seed is required when --perturbations > 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("--alpha must lie in (0, 1)");

  const auto validated = validate_dataset(read_observations_file(data_path), DetectionLimit{a.limit}, a.levels);
  const Dataset& data = validated.data;
  AnalysisConfig ac;
  ac.quad_nodes = a.quad_nodes;
  ac.multinomial_degree = a.multinomial_degree;
  ac.sampling.stratify_s_by_delta_b = a.stratify_s_by_delta_b;
  ac.contrast = Contrast::parse(contrast);
  const CurveGrid grid = parse_grid(grid_spec, &data, data.limit);
  const CurveSet est = evaluate_curves(a.beta, a.nuisance, a.covariates, grid, ac.contrast, Quadrature(a.quad_nodes));

  Run run("curves", args, out_dir);
  run.input(fit_path);
  run.input(data_path);
  const std::uint64_t master = seed.value_or(0);
  if (seed) {
    run.manifest()["master_seed"] = *seed;
  } else {
    run.manifest()["master_seed"] = nullptr;
  }
  run.manifest()["config"] = {{"grid", grid_spec.empty() ? "default" : grid_spec},
                              {"alpha", alpha},
                              {"perturbations", perturbations},
                              {"contrast", ac.contrast.name()}};

  const std::string prefix = seed ? seed_line(master) : std::string();
  std::ostringstream table;
  table << prefix;
  if (perturbations == 0) {
    table << "s,risk1,risk0,mcep,kind\n";
    for (CurveKind k : kAllCurveKinds) {
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto& p = est[k][i];
        table << fmt::format("{},{},{},{},{}\n", full(grid[i]), full(p.risk1), full(p.risk0), full(p.value),
                             curve_kind_name(k));
      }
    }
    run.output("curves.csv", table.str());
    run.finish();
    out << fmt::format("{:>10} {:>13} {:>10}\n", "s", "kind", "mcep");
    for (CurveKind k : kAllCurveKinds) {
      for (std::size_t i = 0; i < grid.size(); ++i) {
        out << fmt::format("{:>10} {:>13} {:>10}\n", six(grid[i]), curve_kind_name(k), six(est[k][i].value));
      }
    }
    return 0;
  }

  EnsembleOptions eo;
  eo.draws = perturbations;
  eo.master_seed = master;
  eo.threads = threads;
  const PerturbationEnsemble ens = run_ensemble(data, ac, grid, a.beta, eo);
  if (!ens.failed_indices.empty()) {
    err << fmt::format("warning: {} of {} perturbation draws failed and were dropped\n", ens.failed_indices.size(),
                       ens.requested);
  }
  const double z = boost::math::quantile(boost::math::normal(), 1.0 - alpha / 2.0);

  std::ostringstream summary;
  summary << prefix << "s,kind,est,se,q_point,q_simul\n";
  table << "s,risk1,risk0,mcep,se,ci_lo,ci_hi,band_lo,band_hi,kind\n";
  std::vector<CurveEstimate> results;
  for (CurveKind k : kAllCurveKinds) {
    CurveEstimate ce = summarize_curve(k, grid, est, ens, alpha);
    if (ce.band.warning) err << "warning: " << curve_kind_name(k) << ": " << *ce.band.warning << "\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto& p = ce.points[i];
      const auto ii = static_cast<Eigen::Index>(i);
      table << fmt::format("{},{},{},{},{},{},{},{},{},{}\n", full(grid[i]), full(p.risk1), full(p.risk0),
                           full(p.value), full(ce.se[ii]), full(ce.ci[i].lo), full(ce.ci[i].hi),
                           full(ce.band.limits[i].lo), full(ce.band.limits[i].hi), curve_kind_name(k));
      summary << fmt::format("{},{},{},{},{},{}\n", full(grid[i]), curve_kind_name(k), full(p.value),
                             full(ce.se[ii]), full(z), full(ce.band.q));
    }
    results.push_back(std::move(ce));
  }
  const TestResult test =
      band_inversion_test(est.values(CurveKind::Difference), ens[CurveKind::Difference], ens.sd(CurveKind::Difference));
  std::ostringstream test_csv;
  test_csv << prefix << "p_value,side,sup_stat\n"
           << fmt::format("{},{},{}\n", full(test.p_value), test.side, full(test.sup_stat));

  run.output("curves.csv", table.str());
  run.output("ensemble.csv", summary.str());
  run.output("test.csv", test_csv.str());
  run.manifest()["successful_draws"] = ens.size();
  run.finish();

  out << prefix;
  out << fmt::format("{:>10} {:>13} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n", "s", "kind", "mcep", "se", "ci_lo",
                     "ci_hi", "band_lo", "band_hi");
  for (const auto& ce : results) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      out << fmt::format("{:>10} {:>13} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n", six(grid[i]),
                         curve_kind_name(ce.kind), six(ce.points[i].value), six(ce.se[static_cast<Eigen::Index>(i)]),
                         six(ce.ci[i].lo), six(ce.ci[i].hi), six(ce.band.limits[i].lo), six(ce.band.limits[i].hi));
    }
  }
  out << fmt::format("H0 seropositive = seronegative: p_value {}  side {}  sup_stat {}\n", six(test.p_value),
                     test.side, six(test.sup_stat));
  return 0;
}

int cmd_montecarlo(const std::vector<std::string>& args, const std::string& config_path,
                   const std::optional<std::uint64_t>& seed, const std::string& design, std::size_t replications,
                   std::size_t perturbations, double alpha, int quad_nodes, const std::string& grid_spec,
                   std::size_t oracle_subjects, unsigned threads, const std::string& out_dir, std::ostream& out,
                   std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const SimConfig cfg = load_profile(config_path, seed, design);
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("--alpha must lie in (0, 1)");
  MonteCarloOptions mo;
  mo.replications = replications;
  mo.perturbations = perturbations;
  mo.alpha = alpha;
  mo.threads = threads;
  mo.master_seed = cfg.master_seed;
  mo.analysis.quad_nodes = quad_nodes;

  Run run("montecarlo", args, out_dir);
  run.input(config_path);
  run.manifest()["master_seed"] = cfg.master_seed;
  run.manifest()["config"] = {{"profile", sim_config_text(cfg)},
                              {"replications", replications},
                              {"perturbations", perturbations},
                              {"alpha", alpha},
                              {"quad_nodes", quad_nodes},
                              {"grid", grid_spec.empty() ? "population" : grid_spec},
                              {"oracle_subjects", oracle_subjects}};

  const CurveGrid grid = grid_spec.empty() || grid_spec == "population"
                             ? population_grid(cfg)
                             : parse_grid(grid_spec, nullptr, DetectionLimit{cfg.limit});
  OracleOptions oo;
  oo.subjects = oracle_subjects;
  const TrueCurves truth = true_curves(cfg, grid, mo.analysis.contrast, oo);
  for (const auto& w : truth.warnings) err << "warning: oracle: " << w << "\n";
  const MonteCarloReport report = monte_carlo(cfg, grid, truth, mo);
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";

  const std::string prefix = seed_line(cfg.master_seed);
  std::ostringstream points, summary, tests;
  points << prefix;
  write_mc_points(points, report);
  summary << prefix;
  write_mc_summary(summary, report);
  tests << prefix;
  write_mc_tests(tests, report);
  run.output("mc_points.csv", points.str());
  run.output("mc_summary.csv", summary.str());
  run.output("mc_tests.csv", tests.str());
  run.manifest()["completed_replications"] = report.completed;
  run.manifest()["failed_replications"] = report.failed;
  run.finish();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  run.write_raw("runtime.txt", fmt::format("wall_seconds = {:.3f}\nthreads = {}\n", seconds, threads));

  out << prefix;
  out << fmt::format("design {}  replications {}/{}  perturbations {}\n", design_name(cfg.design), report.completed,
                     report.requested, perturbations);
  out << fmt::format("{:>13} {:>10} {:>10} {:>10} {:>10}\n", "kind", "max|bias|", "cover_min", "cover_max",
                     "simul");
  for (CurveKind k : kAllCurveKinds) {
    const auto ki = static_cast<std::size_t>(k);
    double bias = 0.0, lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < report.grid.size(); ++i) {
      if (!report.central[i]) continue;
      bias = std::max(bias, std::abs(report.bias[ki][i]));
      lo = std::min(lo, report.pointwise_cover[ki][i]);
      hi = std::max(hi, report.pointwise_cover[ki][i]);
    }
    out << fmt::format("{:>13} {:>10} {:>10} {:>10} {:>10}\n", curve_kind_name(k), six(bias), six(lo), six(hi),
                       six(report.simultaneous_cover[ki]));
  }
  out << fmt::format("band-inversion rejection rate at {}: {}\n", six(alpha), six(report.rejection_rate));
  out << fmt::format("wall time {} s\n", six(seconds));
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Marginal and principal-stratum VE curves under two-phase biomarker sampling", "emcurve"};
  app.require_subcommand(1);

  std::string config, data, fit, grid, design, out_dir, contrast = "ve";
  std::optional<std::uint64_t> seed;
  double alpha = 0.05, limit = 1.0;
  int quad_nodes = 40, levels = 0, degree = 1;
  std::size_t perturbations = 250, replications = 100, oracle_subjects = 10'000'000;
  unsigned threads = default_threads();
  bool no_stratify = false;

  auto* sim = app.add_subcommand("simulate", "Simulate one trial from a profile");
  sim->add_option("--config", config, "Simulation profile")->required();
  sim->add_option("--seed", seed, "Override the profile's master_seed");
  sim->add_option("--design", design, "bip or bip-cpv; overrides the profile");
  sim->add_option("--out", out_dir, "Output directory")->required();

  auto* fitc = app.add_subcommand("fit", "Fit the risk, nuisance and covariate models");
  fitc->add_option("--data", data, "Dataset CSV")->required();
  fitc->add_option("--limit", limit, "Assay detection limit c")->capture_default_str();
  fitc->add_option("--levels", levels, "Number of covariate levels (0 infers)")->capture_default_str();
  fitc->add_option("--quad-nodes", quad_nodes, "Gauss-Legendre nodes per truncated normal")->capture_default_str();
  fitc->add_option("--degree", degree, "Polynomial degree of the P(X | S) models")->capture_default_str();
  fitc->add_flag("--no-joint-strata", no_stratify, "Do not stratify S sampling by delta_b for joint subsets");
  fitc->add_option("--out", out_dir, "Output directory")->required();

  auto* cur = app.add_subcommand("curves", "Evaluate curves with perturbation CIs, bands and the H0 test");
  cur->add_option("--fit", fit, "fit.txt written by 'fit'")->required();
  cur->add_option("--data", data, "Dataset the fit was made from")->required();
  cur->add_option("--grid", grid, "'default', lo:hi:n or a comma list");
  cur->add_option("--alpha", alpha, "Level of intervals, bands and the test")->capture_default_str();
  cur->add_option("--perturbations", perturbations, "Perturbation draws B (0 = point estimates)")
      ->capture_default_str();
  cur->add_option("--seed", seed, "Master seed of the perturbation stream");
  cur->add_option("--contrast", contrast, "ve, difference or log-ratio")->capture_default_str();
  cur->add_option("--threads", threads, "Worker threads");
  cur->add_option("--out", out_dir, "Output directory")->required();

  auto* mc = app.add_subcommand("montecarlo", "Monte Carlo study of bias, coverage and test size");
  mc->add_option("--config", config, "Simulation profile")->required();
  mc->add_option("--seed", seed, "Override the profile's master_seed");
  mc->add_option("--design", design, "bip or bip-cpv; overrides the profile");
  mc->add_option("--replications", replications, "Simulated trials")->capture_default_str();
  mc->add_option("--perturbations", perturbations, "Perturbation draws per trial")->capture_default_str();
  mc->add_option("--alpha", alpha, "Nominal level")->capture_default_str();
  mc->add_option("--quad-nodes", quad_nodes, "Gauss-Legendre nodes per truncated normal")->capture_default_str();
  mc->add_option("--grid", grid, "'population', lo:hi:n or a comma list");
  mc->add_option("--oracle-subjects", oracle_subjects, "Population size of the truth oracle")->capture_default_str();
  mc->add_option("--threads", threads, "Worker threads");
  mc->add_option("--out", out_dir, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  if (threads == 0) threads = 1;

  try {
    if (sim->parsed()) return cmd_simulate(args, config, seed, design, out_dir, out);
    if (fitc->parsed()) {
      return cmd_fit(args, data, limit, levels, quad_nodes, degree, no_stratify, out_dir, out, err);
    }
    if (cur->parsed()) {
      return cmd_curves(args, fit, data, grid, alpha, perturbations, seed, contrast, threads, out_dir, out, err);
    }
    return cmd_montecarlo(args, config, seed, design, replications, perturbations, alpha, quad_nodes, grid,
                          oracle_subjects, threads, out_dir, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace emcurve::cli
