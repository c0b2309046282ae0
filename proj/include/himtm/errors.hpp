#pragma once

#include <stdexcept>
#include <string>

namespace himtm {

// Operand shapes do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an operation's precondition (non-scalar loss, odd merge input, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Object used in the wrong state, e.g. backward on a consumed tape.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inconsistent or invalid configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input data or files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN / Inf encountered where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace himtm
