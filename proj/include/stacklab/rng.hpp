#pragma once

#include "stacklab/common.hpp"

#include <cstdint>
#include <string>

namespace stacklab {

// All randomness in the project flows through RngStream. The generator is
// xoshiro256** (Blackman & Vigna), seeded by hashing (seed, purpose, stream
// index) through SplitMix64. Identical (seed, purpose, index, draw sequence)
// therefore reproduces identical values on any platform with IEEE-754 doubles.
enum class RngPurpose : std::uint64_t {
  init = 1,
  dropout = 2,
  sampling = 3,
  data = 4,
  search = 5,
};

inline const char* to_string(RngPurpose p) {
  switch (p) {
    case RngPurpose::init: return "init";
    case RngPurpose::dropout: return "dropout";
    case RngPurpose::sampling: return "sampling";
    case RngPurpose::data: return "data";
    case RngPurpose::search: return "search";
  }
  return "?";
}

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  RngStream(std::uint64_t seed, RngPurpose purpose, std::uint64_t index = 0) {
    std::uint64_t h = seed;
    (void)splitmix64(h);
    h ^= static_cast<std::uint64_t>(purpose) * 0xd6e8feb86659fd93ULL;
    (void)splitmix64(h);
    h ^= index * 0xa3b195354a39b70dULL;
    for (auto& s : state_) s = splitmix64(h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // 53-bit uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    require(n > 0, "RngStream::next_below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4];
};

}  // namespace stacklab
