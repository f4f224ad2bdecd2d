#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sliceprop {

// Base for every error raised by the library. Subclasses carry the category;
// the CLI maps categories onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class PersistenceError : public Error {
 public:
  PersistenceError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& field, const std::string& what)
      : Error("field '" + field + "': " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class TruncationError : public Error {
 public:
  TruncationError(const std::string& path, std::size_t expected, std::size_t actual)
      : Error(path + ": payload has " + std::to_string(actual) + " bytes, expected " +
              std::to_string(expected)) {}
};

class DegenerateSpecError : public Error {
 public:
  using Error::Error;
};

class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

class ScaleTooLargeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class RefinementError : public Error {
 public:
  RefinementError(const std::string& refiner, const std::string& what)
      : Error("refiner '" + refiner + "' failed: " + what), refiner_(refiner) {}
  const std::string& refiner() const { return refiner_; }

 private:
  std::string refiner_;
};

class StageDependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace sliceprop
