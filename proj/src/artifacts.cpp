#include "emcurve/artifacts.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "emcurve/errors.hpp"

namespace emcurve {

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericDomainError("SHA-256 digest failed");
  }
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

void KeyValueBlock::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = value;
}

void KeyValueBlock::set(const std::string& key, double value) { set(key, fmt::format("{:.17g}", value)); }

void KeyValueBlock::set(const std::string& key, const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) s += fmt::format("{}{:.17g}", i ? ", " : "", values[i]);
  set(key, s);
}

void KeyValueBlock::set(const std::string& key, const Eigen::VectorXd& values) {
  set(key, std::vector<double>(values.data(), values.data() + values.size()));
}

const std::string& KeyValueBlock::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError(fmt::format("missing key '{}'", key));
  return it->second;
}

double KeyValueBlock::number(const std::string& key) const {
  const auto v = numbers(key);
  if (v.size() != 1) throw ValidationError(fmt::format("key '{}' expects one number", key));
  return v[0];
}

std::vector<double> KeyValueBlock::numbers(const std::string& key) const {
  std::vector<double> out;
  const std::string& text = get(key);
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    const std::string t = b == std::string::npos ? "" : item.substr(b, e - b + 1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      throw ValidationError(fmt::format("key '{}': '{}' is not a number", key, t));
    }
    out.push_back(v);
  }
  return out;
}

void KeyValueBlock::write(std::ostream& out) const {
  for (const auto& k : order_) out << k << " = " << values_.at(k) << "\n";
}

KeyValueBlock KeyValueBlock::read(std::istream& in) {
  KeyValueBlock kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) {
      if (line.size() > 2 && line.substr(line.size() - 2) == " =") {
        kv.set(line.substr(0, line.size() - 2), std::string());
        continue;
      }
      throw ValidationError(fmt::format("line {}: expected 'key = value'", lineno));
    }
    kv.set(line.substr(0, eq), line.substr(eq + 3));
  }
  return kv;
}

void put_model(KeyValueBlock& kv, const std::string& p, const CensoredNormalModel& m) {
  kv.set(p + ".coefficients", m.coefficients);
  kv.set(p + ".sigma", m.sigma);
  kv.set(p + ".limit", m.limit);
}

CensoredNormalModel get_model(const KeyValueBlock& kv, const std::string& p) {
  CensoredNormalModel m;
  const auto c = kv.numbers(p + ".coefficients");
  m.coefficients = Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
  m.sigma = kv.number(p + ".sigma");
  m.limit = kv.number(p + ".limit");
  if (!(m.sigma > 0.0)) throw ValidationError(fmt::format("{}.sigma must be positive", p));
  return m;
}

void put_multinomial(KeyValueBlock& kv, const std::string& p, const MultinomialModel& m) {
  kv.set(p + ".levels", static_cast<double>(m.levels));
  kv.set(p + ".degree", static_cast<double>(m.degree));
  kv.set(p + ".center", m.center);
  kv.set(p + ".scale", m.scale);
  std::vector<double> g;
  for (Eigen::Index j = 0; j < m.gamma.rows(); ++j)
    for (Eigen::Index d = 0; d < m.gamma.cols(); ++d) g.push_back(m.gamma(j, d));
  kv.set(p + ".gamma", g);
  kv.set(p + ".separation_warning", m.separation_warning ? "1" : "0");
}

MultinomialModel get_multinomial(const KeyValueBlock& kv, const std::string& p) {
  MultinomialModel m;
  m.levels = static_cast<int>(kv.number(p + ".levels"));
  m.degree = static_cast<int>(kv.number(p + ".degree"));
  m.center = kv.number(p + ".center");
  m.scale = kv.number(p + ".scale");
  const auto g = kv.numbers(p + ".gamma");
  if (m.levels < 1 || m.degree < 0 || g.size() != static_cast<std::size_t>((m.levels - 1) * (m.degree + 1))) {
    throw ValidationError(fmt::format("{}: inconsistent multinomial dimensions", p));
  }
  m.gamma.resize(m.levels - 1, m.degree + 1);
  for (int j = 0; j < m.levels - 1; ++j)
    for (int d = 0; d <= m.degree; ++d) m.gamma(j, d) = g[static_cast<std::size_t>(j * (m.degree + 1) + d)];
  m.separation_warning = kv.get(p + ".separation_warning") == "1";
  return m;
}

KeyValueBlock fit_to_block(const PipelineFit& fit, const Dataset& data, const AnalysisConfig& config,
                           const std::string& dataset_sha256) {
  KeyValueBlock kv;
  kv.set("version", kArtifactVersion);
  kv.set("dataset_sha256", dataset_sha256);
  kv.set("rows", static_cast<double>(data.size()));
  kv.set("levels", static_cast<double>(data.levels));
  kv.set("limit", data.limit.c);
  kv.set("quad_nodes", static_cast<double>(config.quad_nodes));
  kv.set("multinomial_degree", static_cast<double>(config.multinomial_degree));
  kv.set("stratify_s_by_delta_b", config.sampling.stratify_s_by_delta_b ? "1" : "0");
  const Eigen::VectorXd beta = fit.beta.beta_hat.to_vector();
  kv.set("beta", beta);
  put_model(kv, "b_given_x", fit.nuisance.b_given_x);
  put_model(kv, "s_given_b", fit.nuisance.s_given_b);
  put_multinomial(kv, "px_marginal", fit.px_marginal.model);
  put_multinomial(kv, "px_seropositive", fit.px_seropositive.model);
  put_multinomial(kv, "px_seronegative", fit.px_seronegative.model);
  const auto& f = fit.beta;
  kv.set("diag.log_likelihood", f.log_likelihood);
  kv.set("diag.iterations", static_cast<double>(f.iterations));
  kv.set("diag.grad_norm", f.grad_norm);
  kv.set("diag.branch_counts_d00_d01_d10_d11",
         std::vector<double>{static_cast<double>(f.branch_counts[0]), static_cast<double>(f.branch_counts[1]),
                             static_cast<double>(f.branch_counts[2]), static_cast<double>(f.branch_counts[3])});
  kv.set("diag.clamp_count", static_cast<double>(f.clamp_count));
  kv.set("diag.hessian_condition", f.hessian_condition);
  kv.set("diag.identifiability_warning", f.identifiability_warning ? "1" : "0");
  kv.set("diag.b_given_x.log_likelihood", fit.b_given_x.diag.log_likelihood);
  kv.set("diag.b_given_x.grad_norm", fit.b_given_x.diag.grad_norm);
  kv.set("diag.s_given_b.log_likelihood", fit.s_given_b.diag.log_likelihood);
  kv.set("diag.s_given_b.grad_norm", fit.s_given_b.diag.grad_norm);
  return kv;
}

FitArtifact fit_from_block(const KeyValueBlock& kv) {
  FitArtifact a;
  if (kv.get("version") != kArtifactVersion) {
    throw ValidationError(fmt::format("fit artifact version '{}' is not '{}'", kv.get("version"), kArtifactVersion));
  }
  a.dataset_sha256 = kv.get("dataset_sha256");
  a.levels = static_cast<int>(kv.number("levels"));
  a.limit = kv.number("limit");
  a.quad_nodes = static_cast<int>(kv.number("quad_nodes"));
  a.multinomial_degree = static_cast<int>(kv.number("multinomial_degree"));
  a.stratify_s_by_delta_b = kv.get("stratify_s_by_delta_b") == "1";
  const auto beta = kv.numbers("beta");
  a.beta = RiskParams::from_vector(Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size())));
  a.beta.validate(a.levels);
  a.nuisance.b_given_x = get_model(kv, "b_given_x");
  a.nuisance.s_given_b = get_model(kv, "s_given_b");
  a.covariates.marginal = get_multinomial(kv, "px_marginal");
  a.covariates.seropositive = get_multinomial(kv, "px_seropositive");
  a.covariates.seronegative = get_multinomial(kv, "px_seronegative");
  return a;
}

}  // namespace emcurve
