#pragma once

#include <stdexcept>
#include <string>

namespace sae {

// Bad shapes, out-of-range indices, unknown names. CLI maps this to exit 2.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inputs that are well-formed but mathematically unusable (zero norm, zero baseline).
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed or truncated files. The message names the byte offset.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Divergence or non-finite losses during training. CLI maps this to exit 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace sae
