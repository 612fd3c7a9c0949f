#pragma once

#include <stdexcept>
#include <string>

namespace transagent {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration value or schema violation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Unknown agent id, missing cache key, unknown vocabulary word.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm rows and other conditions that would otherwise produce NaN.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Operation not allowed in the current lifecycle state (e.g. export mid-epoch).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Inputs are individually valid but inconsistent with each other.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A referenced input file does not exist.
class MissingInput : public Error {
 public:
  using Error::Error;
};

}  // namespace transagent
