#pragma once

#include <stdexcept>
#include <string>

namespace ideaprune {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Shapes of two operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension"; }
};

/// Invalid or inconsistent run configuration. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// NaN/Inf encountered in a loss or gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "non_finite"; }
};

/// A test oracle could not produce a trustworthy value.
class OracleError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "oracle"; }
};

/// Checkpoint/corpus file is corrupt, truncated, or of the wrong version.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

/// Data-related failure: unreadable file, empty or too-small corpus.
class DataError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "data"; }
};

/// Violated internal contract (e.g. schedule vs. committed-set mismatch).
class InternalError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "internal"; }
};

}  // namespace ideaprune
