#pragma once

#include <stdexcept>
#include <string>

namespace agro {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (exit code 3 at the CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values in a loss, gradient or likelihood.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A required artifact is absent on disk (exit code 2 at the CLI).
class MissingInputError : public Error {
 public:
  explicit MissingInputError(std::string path)
      : Error("missing input: " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace agro
