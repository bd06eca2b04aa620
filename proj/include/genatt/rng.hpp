#pragma once

#include <cmath>
#include <cstdint>

namespace genatt {

// Counter-based pseudo-random stream. The k-th draw of a given seed is
// splitmix64_mix(seed + k * golden_ratio), so streams are fully determined
// by (seed, counter) and reproduce bit-identically across runs and
// platforms. No platform RNG is used anywhere in the library.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), counter_(0) {}

  std::uint64_t next_u64() {
    std::uint64_t x = seed_ + kGolden * ++counter_;
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  // Uniform integer in [0, bound) via Lemire's multiply-shift reduction.
  std::uint64_t uniform_int(std::uint64_t bound) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace genatt
