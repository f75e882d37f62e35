#pragma once

#include <stdexcept>
#include <string>

namespace adavib {

// Bad argument value (empty input, out-of-range id, step past schedule end).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Matrix/vector shapes that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Value outside a function's mathematical domain (e.g. non-positive sigma).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Operation invoked on missing or stale intermediates.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inconsistent configuration, including vocabulary/dimension mismatches
// between artifacts and unsupported format versions.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file content. The message names the file and line.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace adavib
