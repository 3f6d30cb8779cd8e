#pragma once

#include <stdexcept>
#include <string>

namespace uolo {

/// Invalid shapes, architecture settings or option values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (images, manifests, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values reached the optimizer or a loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse, e.g. backward on a non-scalar or on a stale tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace uolo
