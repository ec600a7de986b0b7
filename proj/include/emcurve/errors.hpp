#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace emcurve {

// Base for all library errors. The exit code is the CLI contract:
// 2 validation, 3 convergence/numeric, 4 design.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what, 2) {}
};

/// Malformed input data; `row` is the 1-based data row (0 when not tied to a row).
class SchemaError : public ValidationError {
 public:
  SchemaError(const std::string& what, std::size_t row)
      : ValidationError(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> trace = {})
      : Error(what, 3), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

class NumericDomainError : public Error {
 public:
  explicit NumericDomainError(const std::string& what) : Error(what, 3) {}
};

class UnderflowError : public NumericDomainError {
 public:
  using NumericDomainError::NumericDomainError;
};

class DesignError : public Error {
 public:
  explicit DesignError(const std::string& what) : Error(what, 4) {}
};

class NonIdentifiableError : public DesignError {
 public:
  using DesignError::DesignError;
};

class EmptyStratumError : public DesignError {
 public:
  using DesignError::DesignError;
};

}  // namespace emcurve
