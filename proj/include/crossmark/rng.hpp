#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "crossmark/common.hpp"

namespace crossmark {

// splitmix64, used to derive independent stream seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seed derivation: every stochastic site draws from an Rng
// seeded by a chain of ids off the master seed, never from a shared mutable
// generator. (seed, ids...) fully determines the stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
  return splitmix64(seed ^ splitmix64(a));
}
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
  return derive_seed(derive_seed(seed, a, b), c);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::mt19937_64& gen() { return gen_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  i64 uniform_int(i64 lo, i64 hi) {  // inclusive range
    return std::uniform_int_distribution<i64>(lo, hi)(gen_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  // State round-trips exactly through the text serialization of mt19937_64.
  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw NumericError("invalid rng state string");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace crossmark
