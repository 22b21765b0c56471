#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace avfuse {

using Index = std::int64_t;
using Shape = std::vector<Index>;

// Default numeric width for the pipeline; tests instantiate double where
// oracle tolerances require the headroom.
using DefaultScalar = float;

// Violated precondition or shape contract (programming or bad-argument error).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or malformed external input (files, manifests, streams).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or other numeric breakdown at run time.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_product(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

}  // namespace avfuse
