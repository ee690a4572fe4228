#pragma once

#include <stdexcept>
#include <string>

namespace equivar {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class PermutationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class GroupError : public Error {
 public:
  using Error::Error;
};

class RepresentationError : public Error {
 public:
  using Error::Error;
};

class ClosureError : public Error {
 public:
  using Error::Error;
};

class StructureError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ExtentError : public Error {
 public:
  using Error::Error;
};

class UnsupportedKernelError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace equivar
