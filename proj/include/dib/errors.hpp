#pragma once

#include <stdexcept>
#include <string>

namespace dib {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not compose (matmul inner dims, bias width, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A class/target index outside its declared range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or argument value.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward pass or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A modelling assumption is violated (empty class, empty preimage, ...).
class AssumptionError : public Error {
 public:
  using Error::Error;
};

/// Too few usable items for a statistic (for example a filtered model zoo).
class InsufficientSampleError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace dib
