#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ptrick {

// Every error carries a short machine-readable kind used by the CLI prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error("schema", what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

class SpecError : public Error {
 public:
  explicit SpecError(const std::string& what) : Error("spec", what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class AliasingError : public Error {
 public:
  AliasingError(const std::string& column, const std::string& what)
      : Error("aliasing", what), column_(column) {}
  const std::string& column() const noexcept { return column_; }

 private:
  std::string column_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> trace, int iteration = -1)
      : Error("convergence", what), trace_(std::move(trace)), iteration_(iteration) {}
  const std::vector<double>& trace() const noexcept { return trace_; }
  // ECM iteration during which an inner fit failed; -1 outside the ECM loop.
  int iteration() const noexcept { return iteration_; }

 private:
  std::vector<double> trace_;
  int iteration_;
};

class PredictionError : public Error {
 public:
  explicit PredictionError(const std::string& what) : Error("prediction", what) {}
};

}  // namespace ptrick
