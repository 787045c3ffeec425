#pragma once

#include <stdexcept>
#include <string>

namespace attnprune {

// Incompatible matrix/block shapes. Messages name both shapes involved.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A plan, config or accumulator failed a structural check.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint / dataset file problems: bad magic, truncation, unreadable path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A computation produced NaN/Inf or an otherwise unusable numeric result.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace attnprune
