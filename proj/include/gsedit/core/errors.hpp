#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gsedit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// Violated caller contract: mismatched dimensions, out-of-range index, etc.
class ContractError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed file structure. `offset` is the byte position where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Required field or property absent from an otherwise well-formed input.
class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& field)
      : Error("missing required property: " + field), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Remote or mock model failure (transport, HTTP status, contract breach by the backend).
class BackendError : public Error {
 public:
  using Error::Error;
};

class FixtureMissingError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// Wraps a failure with the pipeline stage it came from, e.g. "lift: ...".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace gsedit
