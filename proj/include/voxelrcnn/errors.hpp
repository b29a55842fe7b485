#pragma once

#include <stdexcept>
#include <string>

namespace voxelrcnn {

// Base of every error the library throws. The CLI maps the subclasses onto
// exit codes (config/usage -> 2, data -> 3, everything else -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data errors: anything wrong with a file on disk.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class TruncationError : public DataError {
 public:
  using DataError::DataError;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, int line)
      : DataError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

}  // namespace voxelrcnn
