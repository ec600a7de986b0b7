#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace emcurve::cli {

/// Runs one subcommand. Returns the process exit code:
/// 0 success, 2 validation, 3 convergence or numeric, 4 design.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace emcurve::cli
