#pragma once

#include <stdexcept>
#include <string>

namespace musegen {

// Base of all library errors. The CLI maps subclasses onto exit codes:
// validation/state -> 3, missing artifact/format/io -> 4, numeric -> 5.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument or precondition violation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Operation called on an object in the wrong state (e.g. untrained codebook).
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Wrong magic, version, or corrupt payload in an artifact file.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// A required upstream artifact does not exist on disk.
class MissingArtifactError : public IoError {
 public:
  using IoError::IoError;
};

// Divergence, non-finite values, or iteration caps hit without convergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace musegen
