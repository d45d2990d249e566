#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dualrd {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Derives an independent child seed from a root seed, a tag and up to two
/// indices. Pure function of its arguments, so any stream can be recreated
/// without carrying RNG state around (checkpoint resume relies on this).
inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t a = 0,
                            uint64_t b = 0) {
  uint64_t s = root ^ (fnv1a(tag) + 0x9e3779b97f4a7c15ull);
  splitmix64(s);
  s ^= a * 0xff51afd7ed558ccdull + 1;
  splitmix64(s);
  s ^= b * 0xc4ceb9fe1a85ec53ull + 1;
  return splitmix64(s);
}

/// Deterministic RNG with hand-rolled distributions. std:: distributions are
/// implementation-defined, which would break bit-identical dataset
/// regeneration across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return n <= 1 ? 0 : int64_t(next_u64() % uint64_t(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, std) resampled until within `bound` standard deviations.
  double trunc_normal(double std_dev, double bound = 2.0) {
    double z = normal();
    while (std::abs(z) > bound) z = normal();
    return z * std_dev;
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dualrd
