#pragma once

#include <stdexcept>
#include <string>

namespace compomerge {

/// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input values that an operation is undefined on (zero vector for cosine, NaN loss, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Contract violation in caller-supplied data or configuration.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk content (safetensors header, JSONL line, config JSON).
class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Filesystem failure: cannot open, read or write.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace compomerge
