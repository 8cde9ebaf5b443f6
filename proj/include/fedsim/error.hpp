#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Raised for violated preconditions and malformed inputs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a checkpoint blob fails validation.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Raised by config validation; carries the offending field path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace fedsim
