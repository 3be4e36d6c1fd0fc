#pragma once

#include <stdexcept>
#include <string>

namespace vtt {

// Base for every error this library raises. The CLI maps subclasses onto
// process exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or matrix extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (bad magic, duplicate vocabulary entry, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

// File payload shorter than its header promises.
class LengthError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Well-formed file carrying unusable values (NaN, Inf).
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Requested vocabulary size cannot hold the mandatory entries.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Numeric failure during optimization (non-finite gradient or log-prob).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace vtt
