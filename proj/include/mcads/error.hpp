#pragma once

#include <stdexcept>
#include <string>

namespace mcads {

// Incompatible shapes, bad configuration values, invalid arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by an op, or a failed numeric precondition.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable or malformed files, dataset inconsistencies.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mcads
