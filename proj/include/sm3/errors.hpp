#pragma once

#include <stdexcept>
#include <string>

namespace sm3 {

/// Base of every error raised by the library. The CLI maps each subclass to
/// its own process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument; the message names the offending field.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in a value, loss, or gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Structurally malformed file (bad JSON, wrong sizes, missing keys).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable, or unwritable.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sm3
