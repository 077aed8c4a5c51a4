#pragma once

#include <stdexcept>
#include <string>

namespace fedmoe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid caller-supplied data (e.g. a label outside [0, K)).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value; messages carry the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk container (IDX, checkpoint, CSV, partition JSON).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. asking for a gradient of a tensor the loss never saw.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A client has too few examples to be split into adaptation/gate subsets.
class DegenerateClientError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedmoe
