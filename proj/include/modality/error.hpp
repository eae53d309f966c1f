#pragma once

#include <stdexcept>
#include <string>

namespace modality {

// Base of all library errors. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files, inconsistent specs, contract violations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable/unwritable files.
class IoError : public Error {
 public:
  using Error::Error;
};

// The model cannot explain the data or cannot be evaluated at the given
// parameters (e.g. every class assigns zero probability to a wave).
class ModelError : public Error {
 public:
  using Error::Error;
};

}  // namespace modality
