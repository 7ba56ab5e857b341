#pragma once

#include <stdexcept>
#include <string>

namespace starflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violated by the caller (bad shape, bad parameter).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A math primitive was evaluated outside its domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A linear system or factorization hit a zero or negative pivot.
class SingularError : public Error {
 public:
  using Error::Error;
};

// A file could not be read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// A computation produced a non-finite value (diverged training, bad target).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace starflow
