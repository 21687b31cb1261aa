#pragma once

#include <stdexcept>
#include <string>

namespace flat {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or image geometry that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class label or index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Near-zero vectors, singular homographies, degenerate prototypes.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// API misuse: backward on a non-scalar, stepping without gradients.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Operation requested on a model that is not in the required state
/// (e.g. novel head missing).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint missing, corrupt or inconsistent with its manifest.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameter encountered during optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace flat
