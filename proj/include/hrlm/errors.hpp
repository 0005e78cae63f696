#pragma once

#include <stdexcept>
#include <string>

namespace hrlm {

// Base class for every failure raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Caller violated an operation's stated contract.
struct ContractError : Error {
  using Error::Error;
};

// An operation produced NaN or Inf. Raised at the producing op.
struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& op)
      : Error("non-finite value produced by op: " + op) {}
};

// Malformed or unusable input data.
struct DataError : Error {
  using Error::Error;
};

// Sequence exceeds a length limit (context window, decode cap).
struct LengthError : Error {
  using Error::Error;
};

}  // namespace hrlm
