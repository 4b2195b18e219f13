#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace circuit_probe {

// Problems with user-supplied configuration or input files. The CLI maps
// these to exit code 1; everything else derived from std::exception is 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Adapter or checkpoint does not fit the model it is applied to.
class ConformanceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Two profiles were recorded over different datasets or sites.
class ComparabilityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CapabilityError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A report was requested without the data it needs.
class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace circuit_probe
