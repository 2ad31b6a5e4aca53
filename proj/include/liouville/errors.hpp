#pragma once

#include <stdexcept>
#include <string>

namespace liouville {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A singular potential was evaluated at (or numerically at) a collision.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// Arguments outside an operation's domain (dimension mismatch, empty
/// annulus, degenerate box, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// The mollification quadrature did not settle within its refinement cap.
class QuadratureError : public Error {
 public:
  using Error::Error;
};

/// An adaptive integration exceeded its substep budget.
class SubstepLimitError : public Error {
 public:
  using Error::Error;
};

/// A test function reaches outside the region the ensemble samples.
class CoverageError : public Error {
 public:
  using Error::Error;
};

/// Solutions passed to combine_solutions do not share configurations.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Malformed or schema-invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace liouville
