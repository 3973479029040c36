#pragma once

#include <stdexcept>
#include <string>

namespace gfree {

/// Base of every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyMaskError : public Error {
 public:
  explicit EmptyMaskError(const std::string& what = "mask has no foreground pixels") : Error(what) {}
};

class EmptyHullError : public Error {
 public:
  explicit EmptyHullError(const std::string& what = "visual hull is empty") : Error(what) {}
};

/// Binary or JSON payload is malformed, truncated or has the wrong magic.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input violates a documented precondition or config invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace gfree
