#pragma once

#include <stdexcept>

namespace urnng {

/// Raised when a numeric computation produces NaN/Inf or otherwise cannot
/// continue (divergence, degenerate proposal, ...).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (corpus, tree, checkpoint, config files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace urnng
