#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "emcurve/pipeline.hpp"

namespace emcurve {

inline constexpr const char* kArtifactVersion = "emcurve 1.0.0";

/// Hex SHA-256 of a byte string or a file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

/// Flat `key = value` block; values are strings, lists are comma-separated.
class KeyValueBlock {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, const std::vector<double>& values);
  void set(const std::string& key, const Eigen::VectorXd& values);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;

  void write(std::ostream& out) const;
  static KeyValueBlock read(std::istream& in);

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

/// Writes a censored-normal model under `prefix.` keys.
void put_model(KeyValueBlock& kv, const std::string& prefix, const CensoredNormalModel& m);
CensoredNormalModel get_model(const KeyValueBlock& kv, const std::string& prefix);
void put_multinomial(KeyValueBlock& kv, const std::string& prefix, const MultinomialModel& m);
MultinomialModel get_multinomial(const KeyValueBlock& kv, const std::string& prefix);

/// Everything needed to evaluate curves without refitting.
struct FitArtifact {
  std::string dataset_sha256;
  int levels = 1;
  double limit = 1.0;
  int quad_nodes = 40;
  int multinomial_degree = 1;
  bool stratify_s_by_delta_b = true;
  NuisanceParams nuisance;
  CovariateModels covariates;
  RiskParams beta;
};

KeyValueBlock fit_to_block(const PipelineFit& fit, const Dataset& data, const AnalysisConfig& config,
                           const std::string& dataset_sha256);
FitArtifact fit_from_block(const KeyValueBlock& kv);

}  // namespace emcurve
