#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nli {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or operand dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A stated precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed textual input; carries the byte offset of the defect.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte " + std::to_string(byte_offset) + ")"), offset(byte_offset) {}
  std::size_t offset;
};

/// Structurally invalid data file (schema, field counts, label sets).
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

/// Seeded random source. One instance per run; every stochastic choice
/// (init, shuffling, dropout masks) draws from it in a fixed order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }

  double gaussian(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }

  bool bernoulli(double p) { return std::bernoulli_distribution(p)(eng_); }

  std::uint64_t next() { return eng_(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng_);
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace nli
