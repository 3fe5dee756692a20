#pragma once

#include <stdexcept>
#include <string>

namespace condlora {

/// Operand shapes do not fit the operation.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by inversion when the pivot ratio exceeds the conditioning limit.
class SingularMatrixError : public std::runtime_error {
public:
  SingularMatrixError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

private:
  double condition_;
};

/// Non-finite values, non-convergence, and similar numeric breakdowns.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration or flag values.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed checkpoint or matrix text.
class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace condlora
