#pragma once

#include <stdexcept>
#include <string>

namespace ctta {

/// Invalid configuration, shape mismatch, unknown config key. The CLI maps
/// this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Nonpositive sigma, NaN loss, divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or corrupted checkpoint / frame file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctta
