#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>
#include <vector>

#include "pllforge/core/util.hpp"

namespace pllforge {

// Counter-based deterministic RNG (splitmix64 stream). All randomness in the
// project goes through this type; std::random distributions are avoided
// because their output is implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1); low bit forced so log() is safe.
  double uniform_pos() {
    return static_cast<double>((next_u64() >> 11) | 1ull) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= lim);
    return x % n;
  }

  // Standard normal via Box-Muller; one spare cached.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mu, double sigma) { return mu + sigma * gaussian(); }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t mix64(uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream from (seed, keys...). Keying by instance id
// lets records be processed in any order, or in parallel, with identical
// results.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> keys) {
  uint64_t s = mix64(seed ^ 0x5851F42D4C957F2Dull);
  for (uint64_t k : keys) s = mix64(s ^ (k + 0x9E3779B97F4A7C15ull));
  return Rng(s);
}

inline Rng derive_rng(uint64_t seed, std::string_view tag, uint64_t extra = 0) {
  return derive_rng(seed, {fnv1a(tag), extra});
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; i--) {
    size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace pllforge
