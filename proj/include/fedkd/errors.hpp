#pragma once

#include <stdexcept>
#include <string>

namespace fedkd {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the domain of the operation.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// A run or component was configured inconsistently.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input text could not be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Parsed input violates a data invariant (e.g. a label out of range).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given data.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedkd
