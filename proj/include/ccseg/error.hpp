#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ccseg {

/// Base of every error raised by the library. Each subclass maps to one
/// failure family so callers (the CLI in particular) can pick an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input outside an operator's mathematical domain (log of a non-positive value, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A reduction or statistic is undefined for the given extent (n < 2, H*W < 2, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Sample weights off the simplex.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values surfaced during evaluation or training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff tape (consumed tape, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or format failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint magic or version mismatch.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

std::string format_shape(const std::vector<std::size_t>& shape);

}  // namespace ccseg
