#include "emcurve/dataset.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "emcurve/errors.hpp"

namespace emcurve {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  out.push_back(field);
  for (auto& f : out) {
    const auto first = f.find_first_not_of(" \t");
    const auto last = f.find_last_not_of(" \t");
    f = first == std::string::npos ? std::string() : f.substr(first, last - first + 1);
  }
  return out;
}

double parse_double(const std::string& text, std::size_t row, const char* column) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw SchemaError(fmt::format("row {}: column '{}' is not a finite number: '{}'", row, column, text),
                      row);
  }
  return value;
}

int parse_int(const std::string& text, std::size_t row, const char* column) {
  int value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw SchemaError(fmt::format("row {}: column '{}' is not an integer: '{}'", row, column, text), row);
  }
  return value;
}

int parse_indicator(const std::string& text, std::size_t row, const char* column) {
  const int v = parse_int(text, row, column);
  if (v != 0 && v != 1) {
    throw SchemaError(fmt::format("row {}: column '{}' must be 0 or 1, got {}", row, column, v), row);
  }
  return v;
}

}  // namespace

std::vector<Observation> read_observations(std::istream& in) {
  static const std::vector<std::string> kRequired = {"z", "x", "y_tau", "y", "delta", "s", "delta_b", "b"};
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("dataset is empty: header row required", 0);
  while (!line.empty() && line[0] == '#') {
    if (!std::getline(in, line)) throw SchemaError("dataset is empty: header row required", 0);
  }
  const auto header = split_fields(line);
  const bool with_weights = header.size() == 10;
  if (header.size() != 8 && !with_weights) {
    throw SchemaError(fmt::format("header must have 8 or 10 columns, got {}", header.size()), 0);
  }
  for (std::size_t i = 0; i < kRequired.size(); ++i) {
    if (header[i] != kRequired[i]) {
      throw SchemaError(fmt::format("header column {} must be '{}', got '{}'", i + 1, kRequired[i], header[i]), 0);
    }
  }
  if (with_weights && (header[8] != "weight_s" || header[9] != "weight_b")) {
    throw SchemaError("optional header columns must be 'weight_s,weight_b'", 0);
  }

  std::vector<Observation> rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r" || line[0] == '#') continue;
    ++row;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      throw SchemaError(fmt::format("row {}: expected {} fields, got {}", row, header.size(), f.size()), row);
    }
    Observation o;
    o.z = parse_indicator(f[0], row, "z");
    o.x = parse_int(f[1], row, "x");
    o.y_tau = parse_indicator(f[2], row, "y_tau");
    o.y = parse_indicator(f[3], row, "y");
    const int delta = parse_indicator(f[4], row, "delta");
    if (!f[5].empty()) o.s = parse_double(f[5], row, "s");
    const int delta_b = parse_indicator(f[6], row, "delta_b");
    if (!f[7].empty()) o.b = parse_double(f[7], row, "b");
    if (delta == 1 && !o.s) throw SchemaError(fmt::format("row {}: delta=1 without s", row), row);
    if (delta == 0 && o.s) throw SchemaError(fmt::format("row {}: s present with delta=0", row), row);
    if (delta_b == 1 && !o.b) throw SchemaError(fmt::format("row {}: delta_b=1 without b", row), row);
    if (delta_b == 0 && o.b) throw SchemaError(fmt::format("row {}: b present with delta_b=0", row), row);
    if (with_weights) {
      if (!f[8].empty()) o.weight_s = parse_double(f[8], row, "weight_s");
      if (!f[9].empty()) o.weight_b = parse_double(f[9], row, "weight_b");
    }
    rows.push_back(o);
  }
  return rows;
}

std::vector<Observation> read_observations_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset '" + path + "'");
  return read_observations(in);
}

void write_observations(std::ostream& out, const std::vector<Observation>& rows) {
  bool with_weights = false;
  for (const auto& o : rows) with_weights = with_weights || o.weight_s || o.weight_b;
  out << "z,x,y_tau,y,delta,s,delta_b,b" << (with_weights ? ",weight_s,weight_b" : "") << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? fmt::format("{:.17g}", *v) : std::string(); };
  for (const auto& o : rows) {
    out << o.z << ',' << o.x << ',' << o.y_tau << ',' << o.y << ',' << (o.delta() ? 1 : 0) << ','
        << opt(o.s) << ',' << (o.delta_b() ? 1 : 0) << ',' << opt(o.b);
    if (with_weights) out << ',' << opt(o.weight_s) << ',' << opt(o.weight_b);
    out << '\n';
  }
}

ValidatedDataset validate_dataset(const std::vector<Observation>& rows, DetectionLimit limit, int levels) {
  if (!std::isfinite(limit.c)) throw ValidationError("detection limit must be finite");
  int max_level = 1;
  for (const auto& o : rows) max_level = std::max(max_level, o.x);
  if (levels == 0) levels = max_level;

  ValidatedDataset out;
  out.data.limit = limit;
  out.data.levels = levels;
  out.report.input_rows = rows.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& o = rows[i];
    const std::size_t row = i + 1;
    if (o.z != 0 && o.z != 1) throw SchemaError(fmt::format("row {}: z must be 0 or 1", row), row);
    if (o.y != 0 && o.y != 1) throw SchemaError(fmt::format("row {}: y must be 0 or 1", row), row);
    if (o.y_tau != 0 && o.y_tau != 1) throw SchemaError(fmt::format("row {}: y_tau must be 0 or 1", row), row);
    if (o.x < 1 || o.x > levels) {
      throw SchemaError(fmt::format("row {}: x={} outside 1..{}", row, o.x, levels), row);
    }
    if (o.s && (!std::isfinite(*o.s) || *o.s < limit.c)) {
      throw SchemaError(fmt::format("row {}: s={} below detection limit {}", row, *o.s, limit.c), row);
    }
    if (o.b && (!std::isfinite(*o.b) || *o.b < limit.c)) {
      throw SchemaError(fmt::format("row {}: b={} below detection limit {}", row, *o.b, limit.c), row);
    }
    if (o.y_tau == 1 && o.s) {
      throw SchemaError(fmt::format("row {}: s must be missing when y_tau=1", row), row);
    }
    auto check_prob = [&](const std::optional<double>& w, bool present, const char* name) {
      if (!w) return;
      if (!present) throw SchemaError(fmt::format("row {}: {} given for an unmeasured marker", row, name), row);
      if (!(*w > 0.0 && *w <= 1.0)) throw SchemaError(fmt::format("row {}: {} must lie in (0,1]", row, name), row);
    };
    check_prob(o.weight_s, o.delta(), "weight_s");
    check_prob(o.weight_b, o.delta_b(), "weight_b");

    if (o.y_tau == 1) {
      out.report.excluded_early.push_back(row);
      continue;
    }
    out.data.rows.push_back(o);
    ++out.report.pattern_counts[(o.delta_b() ? 2 : 0) + (o.delta() ? 1 : 0)];
    ++out.report.arm_counts[static_cast<std::size_t>(o.z)];
  }
  if (out.report.arm_counts[0] == 0) throw DesignError("placebo arm is empty after validation");
  if (out.report.arm_counts[1] == 0) throw DesignError("vaccine arm is empty after validation");
  return out;
}

}  // namespace emcurve
