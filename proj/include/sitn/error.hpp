#pragma once

#include <stdexcept>
#include <string>

namespace sitn {

// Invalid hyper-parameters or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor shapes that do not line up (checkpoint loads, op inputs).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Problems with the data itself: empty datasets, empty sequences, bad labels.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Corrupt or unreadable files.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sitn
