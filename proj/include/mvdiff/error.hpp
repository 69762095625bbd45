#pragma once

#include <stdexcept>
#include <string>

namespace mvdiff {

// Exception hierarchy. Everything thrown by the library derives from Error so
// callers (the CLI in particular) can map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidCamera : public Error {
 public:
  using Error::Error;
};

class DegenerateRay : public Error {
 public:
  using Error::Error;
};

class SingularHomography : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mvdiff
