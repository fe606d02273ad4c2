#pragma once

#include <stdexcept>
#include <string>

namespace alphanet {

/// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or enum spellings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing or malformed files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in gradients or losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Argument outside an operation's mathematical domain (e.g. a negative pixel).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

enum class ExitCode : int {
  ok = 0,
  verification_failure = 1,
  input_error = 2,
  numeric_failure = 3,
};

}  // namespace alphanet
