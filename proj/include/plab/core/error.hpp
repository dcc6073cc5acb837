#pragma once

#include <stdexcept>
#include <string>

namespace plab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument outside an operation's domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace plab
