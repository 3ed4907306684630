#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mmfm {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: draw i of stream `key` is
/// mix64(key + (i + 1) * 0x9E3779B97F4A7C15). This is exactly the SplitMix64
/// sequence seeded with `key`, so any language with 64-bit wrapping arithmetic
/// reproduces it. Any draw can be computed without the ones before it.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  static std::uint64_t at(std::uint64_t key, std::uint64_t counter) {
    return mix64(key + (counter + 1) * kGamma);
  }

  std::uint64_t next_u64() { return at(key_, counter_++); }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Plain modulo; bias is below 2^-40 for the
  /// ranges used here.
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  /// Standard normal via Box-Muller, consuming two draws.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Derive an independent stream key from a parent key and a tag.
constexpr std::uint64_t derive_key(std::uint64_t parent, std::uint64_t tag) {
  return mix64(parent ^ mix64(tag + 0x632BE59BD9B4E019ULL));
}

}  // namespace mmfm
