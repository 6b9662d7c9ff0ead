#pragma once

#include <stdexcept>
#include <string>

namespace combemb {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid counts, fractions or option values.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents or unreadable files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input data violates an operation's precondition (e.g. a seen class
/// without labeled examples).
class DataError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Vector too close to zero to be normalized.
class NormalizationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient, or a construction that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace combemb
