#include "emcurve/simgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <fmt/format.h>

#include "emcurve/errors.hpp"
#include "emcurve/normal.hpp"
#include "emcurve/quadrature.hpp"
#include "emcurve/random.hpp"

namespace emcurve {

std::string design_name(SamplingDesign d) { return d == SamplingDesign::BipOnly ? "bip" : "bip-cpv"; }

SamplingDesign parse_design(const std::string& name) {
  if (name == "bip" || name == "bip-only") return SamplingDesign::BipOnly;
  if (name == "bip-cpv" || name == "bip+cpv") return SamplingDesign::BipCpv;
  throw ValidationError(fmt::format("unknown design '{}' (expected bip or bip-cpv)", name));
}

void SimConfig::validate() const {
  const auto d = x_probs.size();
  if (d == 0) throw ValidationError("x_probs is empty");
  double total = 0.0;
  for (double p : x_probs) {
    if (!(p >= 0.0)) throw ValidationError("x_probs entries must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError(fmt::format("x_probs sum to {} instead of 1", total));
  if (b_coef.size() != d) throw ValidationError(fmt::format("b_coef needs {} entries (intercept + {} dummies)", d, d - 1));
  if (s_coef.size() != d + 1) {
    throw ValidationError(fmt::format("s_coef needs {} entries (intercept, B, {} dummies)", d + 1, d - 1));
  }
  if (!(b_sd > 0.0) || !(s_sd > 0.0)) throw ValidationError("b_sd and s_sd must be positive");
  if (!(cpv_error_sd >= 0.0)) throw ValidationError("cpv_error_sd must be non-negative");
  if (!std::isfinite(limit)) throw ValidationError("limit must be finite");
  if (!(vaccine_ratio > 0.0) || !(placebo_ratio > 0.0)) throw ValidationError("randomization ratios must be positive");
  for (double f : {b_sampling_fraction, cpv_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("sampling fractions must lie in [0, 1]");
  }
  if (n_subjects == 0) throw ValidationError("n_subjects must be positive");
  beta.validate(static_cast<int>(d));
}

double SimConfig::b_mean(int x) const { return b_coef[0] + (x > 1 ? b_coef[static_cast<std::size_t>(x - 1)] : 0.0); }

double SimConfig::s_mean(double b_latent, int x) const {
  return s_coef[0] + s_coef[1] * b_latent + (x > 1 ? s_coef[static_cast<std::size_t>(x)] : 0.0);
}

// ---------------------------------------------------------------------------
// Configuration files

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct Entry {
  std::string value;
  int line = 0;
};

double parse_number(const Entry& e, const std::string& key) {
  const std::string t = trim(e.value);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) {
    throw ValidationError(fmt::format("line {}: key '{}' expects a number, got '{}'", e.line, key, t));
  }
  return v;
}

std::vector<double> parse_list(const Entry& e, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(e.value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number({item, e.line}, key));
  if (out.empty()) throw ValidationError(fmt::format("line {}: key '{}' expects a comma-separated list", e.line, key));
  return out;
}

std::uint64_t parse_unsigned(const Entry& e, const std::string& key) {
  const std::string t = trim(e.value);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) {
    throw ValidationError(fmt::format("line {}: key '{}' expects a non-negative integer, got '{}'", e.line, key, t));
  }
  return v;
}

const char* const kConfigKeys[] = {"n_subjects",   "vaccine_ratio", "placebo_ratio",       "x_probs",
                                   "b_coef",       "b_sd",          "s_coef",              "s_sd",
                                   "limit",        "beta",          "design",              "b_sampling_fraction",
                                   "b_sampling",   "cpv_fraction",  "cpv_error_sd",        "master_seed"};

}  // namespace

SimConfig parse_sim_config(std::istream& in) {
  std::map<std::string, Entry> entries;
  const std::set<std::string> known(std::begin(kConfigKeys), std::end(kConfigKeys));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError(fmt::format("line {}: expected 'key = value'", lineno));
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (!known.count(key)) throw ValidationError(fmt::format("line {}: unknown key '{}'", lineno, key));
    if (entries.count(key)) throw ValidationError(fmt::format("line {}: duplicate key '{}'", lineno, key));
    entries[key] = {value, lineno};
  }
  for (const char* k : kConfigKeys) {
    if (!entries.count(k)) throw ValidationError(fmt::format("missing required key '{}'", k));
  }
  SimConfig c;
  c.n_subjects = parse_unsigned(entries["n_subjects"], "n_subjects");
  c.vaccine_ratio = parse_number(entries["vaccine_ratio"], "vaccine_ratio");
  c.placebo_ratio = parse_number(entries["placebo_ratio"], "placebo_ratio");
  c.x_probs = parse_list(entries["x_probs"], "x_probs");
  c.b_coef = parse_list(entries["b_coef"], "b_coef");
  c.b_sd = parse_number(entries["b_sd"], "b_sd");
  c.s_coef = parse_list(entries["s_coef"], "s_coef");
  c.s_sd = parse_number(entries["s_sd"], "s_sd");
  c.limit = parse_number(entries["limit"], "limit");
  const auto beta = parse_list(entries["beta"], "beta");
  if (beta.size() != 5 + c.x_probs.size()) {
    throw ValidationError(fmt::format("line {}: beta needs {} entries (beta0..beta5 and {} dummies)",
                                      entries["beta"].line, 5 + c.x_probs.size(), c.x_probs.size() - 1));
  }
  c.beta = RiskParams::from_vector(Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size())));
  try {
    c.design = parse_design(entries["design"].value);
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("line {}: {}", entries["design"].line, e.what()));
  }
  c.b_sampling_fraction = parse_number(entries["b_sampling_fraction"], "b_sampling_fraction");
  const std::string mode = entries["b_sampling"].value;
  if (mode == "srs") {
    c.b_sampling_by_arm = false;
  } else if (mode == "by-arm") {
    c.b_sampling_by_arm = true;
  } else {
    throw ValidationError(fmt::format("line {}: b_sampling must be 'srs' or 'by-arm'", entries["b_sampling"].line));
  }
  c.cpv_fraction = parse_number(entries["cpv_fraction"], "cpv_fraction");
  c.cpv_error_sd = parse_number(entries["cpv_error_sd"], "cpv_error_sd");
  c.master_seed = parse_unsigned(entries["master_seed"], "master_seed");
  c.validate();
  return c;
}

SimConfig read_sim_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open config '{}'", path));
  try {
    return parse_sim_config(in);
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

void write_sim_config(std::ostream& out, const SimConfig& c) {
  auto list = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{:.17g}", i ? ", " : "", v[i]);
    return s;
  };
  const Eigen::VectorXd beta = c.beta.to_vector();
  out << fmt::format("n_subjects = {}\n", c.n_subjects) << fmt::format("vaccine_ratio = {:.17g}\n", c.vaccine_ratio)
      << fmt::format("placebo_ratio = {:.17g}\n", c.placebo_ratio) << "x_probs = " << list(c.x_probs) << "\n"
      << "b_coef = " << list(c.b_coef) << "\n"
      << fmt::format("b_sd = {:.17g}\n", c.b_sd) << "s_coef = " << list(c.s_coef) << "\n"
      << fmt::format("s_sd = {:.17g}\n", c.s_sd) << fmt::format("limit = {:.17g}\n", c.limit)
      << "beta = " << list(std::vector<double>(beta.data(), beta.data() + beta.size())) << "\n"
      << "design = " << design_name(c.design) << "\n"
      << fmt::format("b_sampling_fraction = {:.17g}\n", c.b_sampling_fraction)
      << "b_sampling = " << (c.b_sampling_by_arm ? "by-arm" : "srs") << "\n"
      << fmt::format("cpv_fraction = {:.17g}\n", c.cpv_fraction)
      << fmt::format("cpv_error_sd = {:.17g}\n", c.cpv_error_sd) << fmt::format("master_seed = {}\n", c.master_seed);
}

// ---------------------------------------------------------------------------
// Generator

namespace {

int draw_level(const std::vector<double>& probs, double u) {
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    acc += probs[j];
    if (u < acc) return static_cast<int>(j) + 1;
  }
  return static_cast<int>(probs.size());
}

// Marks a simple random sample of round(fraction * |pool|) members.
void sample_without_replacement(std::vector<std::size_t> pool, double fraction, Rng& rng, std::vector<char>& mark) {
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  for (std::size_t i = 0; i < k; ++i) {
    boost::random::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    mark[pool[i]] = 1;
  }
}

}  // namespace

std::vector<Observation> SimulatedTrial::observations() const {
  std::vector<Observation> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back(s.obs);
  return out;
}

Dataset SimulatedTrial::dataset() const {
  return validate_dataset(observations(), limit, levels).data;
}

SimulatedTrial simulate_trial(const SimConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = derive_stream(seed, 0, kStreamTrial);
  boost::random::uniform_01<double> unif;
  boost::random::normal_distribution<double> normal;
  const double c = config.limit;
  const double pz = config.vaccine_probability();
  const std::size_t n = config.n_subjects;

  SimulatedTrial trial;
  trial.subjects.resize(n);
  trial.limit = {c};
  trial.levels = config.levels();
  std::vector<double> s_potential(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& subj = trial.subjects[i];
    auto& o = subj.obs;
    o.z = unif(rng) < pz ? 1 : 0;
    o.x = draw_level(config.x_probs, unif(rng));
    subj.b_latent = config.b_mean(o.x) + config.b_sd * normal(rng);
    subj.s_latent = config.s_mean(subj.b_latent, o.x) + config.s_sd * normal(rng);
    const double b = std::max(subj.b_latent, c);
    s_potential[i] = std::max(subj.s_latent, c);
    o.y = unif(rng) < risk(config.beta, o.z, s_potential[i], b, o.x) ? 1 : 0;
    o.y_tau = 0;
  }

  // Phase two: B on a simple random sample, then S by design.
  std::vector<char> has_b(n, 0), has_cpv(n, 0);
  if (config.b_sampling_by_arm) {
    for (int arm : {0, 1}) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < n; ++i)
        if (trial.subjects[i].obs.z == arm) pool.push_back(i);
      sample_without_replacement(std::move(pool), config.b_sampling_fraction, rng, has_b);
    }
  } else {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    sample_without_replacement(std::move(pool), config.b_sampling_fraction, rng, has_b);
  }
  if (config.design == SamplingDesign::BipCpv) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& o = trial.subjects[i].obs;
      if (o.z == 0 && o.y == 0) pool.push_back(i);
    }
    sample_without_replacement(std::move(pool), config.cpv_fraction, rng, has_cpv);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& subj = trial.subjects[i];
    auto& o = subj.obs;
    if (has_b[i]) o.b = std::max(subj.b_latent, c);
    if (o.z == 1 && (o.y == 1 || has_b[i])) {
      o.s = s_potential[i];
    } else if (has_cpv[i]) {
      const double err = config.cpv_error_sd > 0.0 ? config.cpv_error_sd * normal(rng) : 0.0;
      o.s = std::max(subj.s_latent + err, c);
    }
  }
  return trial;
}

double generator_event_rate(const SimConfig& config, int z) {
  const Quadrature quad(80);
  const double c = config.limit;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<QuadAtom> b_atoms, s_atoms;
  double total = 0.0;
  for (int x = 1; x <= config.levels(); ++x) {
    b_atoms.clear();
    quad.truncated(config.b_mean(x), config.b_sd, -inf, c, b_atoms);
    quad.truncated(config.b_mean(x), config.b_sd, c, inf, b_atoms);
    double px = 0.0;
    for (const auto& ba : b_atoms) {
      s_atoms.clear();
      quad.censored(config.s_mean(ba.value, x), config.s_sd, c, s_atoms);
      for (const auto& sa : s_atoms) px += ba.weight * sa.weight * risk(config.beta, z, sa.value, std::max(ba.value, c), x);
    }
    total += config.x_probs[static_cast<std::size_t>(x - 1)] * px;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Potential-outcome oracle

const std::vector<double>& TrueCurves::operator[](CurveKind k) const {
  switch (k) {
    case CurveKind::Seropositive:
      return seropositive;
    case CurveKind::Seronegative:
      return seronegative;
    case CurveKind::Marginal:
      return marginal;
    case CurveKind::Difference:
      break;
  }
  throw ValidationError("the difference curve is derived; use difference()");
}

std::vector<double> TrueCurves::difference() const {
  std::vector<double> d(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) d[i] = seropositive[i] - seronegative[i];
  return d;
}

namespace {

struct PopulationDraw {
  int x;
  double s;
  double b;
};

template <class F>
void for_each_population_subject(const SimConfig& config, std::size_t subjects, std::uint64_t seed, F&& f) {
  Rng rng = derive_stream(seed, 0, kStreamOracle);
  boost::random::uniform_01<double> unif;
  boost::random::normal_distribution<double> normal;
  for (std::size_t i = 0; i < subjects; ++i) {
    const int x = draw_level(config.x_probs, unif(rng));
    const double b_latent = config.b_mean(x) + config.b_sd * normal(rng);
    const double s_latent = config.s_mean(b_latent, x) + config.s_sd * normal(rng);
    f(PopulationDraw{x, std::max(s_latent, config.limit), std::max(b_latent, config.limit)});
  }
}

}  // namespace

std::vector<double> population_s_quantiles(const SimConfig& config, const std::vector<double>& probs,
                                           std::size_t subjects, std::uint64_t seed) {
  config.validate();
  std::vector<double> s;
  s.reserve(subjects);
  for_each_population_subject(config, subjects, seed, [&](const PopulationDraw& d) { s.push_back(d.s); });
  std::sort(s.begin(), s.end());
  std::vector<double> out;
  for (double p : probs) out.push_back(sample_quantile(s, p));
  return out;
}

TrueCurves true_curves(const SimConfig& config, const CurveGrid& grid, Contrast h, const OracleOptions& options) {
  config.validate();
  const double c = config.limit;
  const double lo = std::max(c, grid[0] - 1.0);
  const double hi = grid[grid.size() - 1] + 1.0;
  const auto bins = static_cast<std::size_t>(std::ceil((hi - lo) / options.bin_width)) + 1;
  // Per stratum (0 marginal, 1 B > c, 2 B = c): count, sum risk1, sum risk0.
  struct Acc {
    std::vector<double> n, r1, r0;
  };
  std::array<Acc, 3> acc;
  for (auto& a : acc) a = {std::vector<double>(bins), std::vector<double>(bins), std::vector<double>(bins)};
  for_each_population_subject(config, options.subjects, options.seed, [&](const PopulationDraw& d) {
    if (d.s < lo || d.s >= hi) return;
    const auto k = static_cast<std::size_t>((d.s - lo) / options.bin_width);
    const double r1 = normal_cdf(config.beta.linear_predictor(1, d.s, d.b, d.x));
    const double r0 = normal_cdf(config.beta.linear_predictor(0, d.s, d.b, d.x));
    for (std::size_t st : {std::size_t{0}, std::size_t{d.b > c ? 1u : 2u}}) {
      acc[st].n[k] += 1.0;
      acc[st].r1[k] += r1;
      acc[st].r0[k] += r0;
    }
  });

  TrueCurves out;
  out.grid = grid.points();
  out.subjects = options.subjects;
  out.half_width.assign(grid.size(), options.window);
  std::array<std::vector<double>*, 3> dest{&out.marginal, &out.seropositive, &out.seronegative};
  const char* names[3] = {"marginal", "seropositive", "seronegative"};
  for (std::size_t st = 0; st < 3; ++st) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      double w = options.window;
      for (;;) {
        const auto k0 = static_cast<std::size_t>(std::max(0.0, std::floor((grid[g] - w - lo) / options.bin_width)));
        const auto k1 = std::min(bins - 1, static_cast<std::size_t>(std::floor((grid[g] + w - lo) / options.bin_width)));
        double n = 0.0, r1 = 0.0, r0 = 0.0;
        for (std::size_t k = k0; k <= k1; ++k) {
          n += acc[st].n[k];
          r1 += acc[st].r1[k];
          r0 += acc[st].r0[k];
        }
        if (n >= static_cast<double>(options.min_window_count) || w > hi - lo) {
          if (w != options.window) {
            out.warnings.push_back(fmt::format("{} window at s={:.4g} widened to +-{:.3g} ({} subjects)", names[st],
                                               grid[g], w, n));
          }
          out.half_width[g] = std::max(out.half_width[g], w);
          dest[st]->push_back(n > 0.0 ? h(r1 / n, r0 / n) : std::numeric_limits<double>::quiet_NaN());
          break;
        }
        w *= 1.5;
      }
    }
  }
  return out;
}

}  // namespace emcurve
