#pragma once

#include <stdexcept>
#include <string>

namespace aesb {

// Error families. The CLI maps each family to its own exit code.

/// Tensor or parameter extents that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf values, degenerate statistics.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed files: labels, probability tables, checkpoints, traces.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Semantically invalid data: labels out of range, missing images, id mismatches.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values or combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace aesb
