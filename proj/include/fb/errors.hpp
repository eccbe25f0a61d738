#pragma once

#include <stdexcept>
#include <string>

namespace fb {

// Base class for everything this library throws on purpose. Callers that
// need "parses or fails cleanly" semantics catch this type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension violations.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid run configuration (bad JSON, unknown keys, invalid values).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input bytes: ZIP containers, NPY headers, checkpoints, images.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error(msg) {}
};

// File system level failures (missing file, short read, write failure).
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// A module-contract violation, e.g. a gradient handed to a frozen parameter.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

}  // namespace fb
