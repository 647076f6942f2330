#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Error taxonomy used across the library. The CLI maps each category to a
// prefixed stderr message and a nonzero exit code.

// Incompatible tensor shapes. Messages name both shapes.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Out-of-range token id, expert index, or element access.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A caller violated an operation's precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Checksum or version mismatch in persisted state.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration file or flag combination.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace moelab
