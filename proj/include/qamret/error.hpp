#pragma once

#include <stdexcept>
#include <string>

namespace qamret {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file does not follow its binary or text layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant (negative activation, NaN,
/// dimension mismatch, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An index or box lies outside its container.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or missing configuration, e.g. R-MAC without whitening.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Too few samples for a statistical fit.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace qamret
