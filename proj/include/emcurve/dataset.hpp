#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "emcurve/model.hpp"

namespace emcurve {

/// Rows eligible for estimation (early events removed) with the shared limit.
struct Dataset {
  std::vector<Observation> rows;
  DetectionLimit limit;
  int levels = 1;

  std::size_t size() const noexcept { return rows.size(); }
};

struct ValidationReport {
  std::size_t input_rows = 0;
  std::vector<std::size_t> excluded_early;  // 1-based input rows with y_tau = 1
  // Counts of (delta_b, delta) patterns indexed by 2 * delta_b + delta.
  std::array<std::size_t, 4> pattern_counts{};
  std::array<std::size_t, 2> arm_counts{};

  std::size_t pattern(bool delta_b, bool delta) const {
    return pattern_counts[(delta_b ? 2 : 0) + (delta ? 1 : 0)];
  }
};

struct ValidatedDataset {
  Dataset data;
  ValidationReport report;
};

/// Checks Observation invariants, drops early-event rows and tabulates
/// missingness patterns. `levels` = 0 infers D from the largest observed level.
ValidatedDataset validate_dataset(const std::vector<Observation>& rows, DetectionLimit limit,
                                  int levels = 0);

/// Delimited text with header `z,x,y_tau,y,delta,s,delta_b,b[,weight_s,weight_b]`.
std::vector<Observation> read_observations(std::istream& in);
std::vector<Observation> read_observations_file(const std::string& path);
void write_observations(std::ostream& out, const std::vector<Observation>& rows);

}  // namespace emcurve
