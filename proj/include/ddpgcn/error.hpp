#pragma once

#include <stdexcept>
#include <string>

namespace ddpgcn {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or contract-violating input data (CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A value outside the mathematical domain of an operation, e.g. a
/// zero-length link or a negative adjacency weight. Reported as a data error.
class DomainError : public DataError {
 public:
  using DataError::DataError;
};

/// Divergence, non-convergence or NaN during computation (CLI exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape mismatch or API misuse.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace ddpgcn
