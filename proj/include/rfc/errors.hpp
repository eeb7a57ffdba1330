#pragma once

#include <stdexcept>
#include <string>

namespace rfc {

// Error taxonomy. The CLI maps these onto process exit codes:
// validation/dimension -> 1, numeric -> 2, io -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid argument values, malformed configs, impossible mining batches.
struct ValidationError : Error {
  using Error::Error;
};

// Non-finite values, degenerate normalizations, tolerance failures.
struct NumericError : Error {
  using Error::Error;
};

// File format and filesystem failures; messages carry the path.
struct IoError : Error {
  using Error::Error;
};

inline void check_dim(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

inline void check_valid(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

inline void check_numeric(bool ok, const std::string& msg) {
  if (!ok) throw NumericError(msg);
}

}  // namespace rfc
