#pragma once

#include <stdexcept>
#include <string>

namespace fectek {

// Failure classes; the CLI maps each to a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or configuration dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A file or stream was readable but its contents are malformed.
class CorruptDataError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fectek
