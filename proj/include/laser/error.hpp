#pragma once

#include <stdexcept>
#include <string>

namespace laser {

// Base error for the library. Each subclass maps onto one CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Input that does not match its declared format (bad magic, truncation,
// too many malformed lines, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

// A precondition on arguments or configuration was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Two artifacts that must agree (LM checkpoint vs cache, template version) do not.
class MismatchError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

}  // namespace laser
