#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace dualstream {

/// Counter-based generator: draw i of stream `key` is mix(key * phi ^ i), where
/// mix is the SplitMix64 finalizer. Any draw can be recomputed from (key, i)
/// alone, so results never depend on call order across threads.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t hash(std::uint64_t key, std::uint64_t counter) {
    return mix((key * 0x9E3779B97F4A7C15ULL) ^ mix(counter));
  }

  /// Uniform double in [0, 1) from a single (key, counter) draw.
  static double uniform_at(std::uint64_t key, std::uint64_t counter) {
    return static_cast<double>(hash(key, counter) >> 11) * 0x1.0p-53;
  }

  /// Stable 64-bit hash of a string (FNV-1a), used to key per-clip streams.
  static constexpr std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ULL;
    }
    return h;
  }

  CounterRng derive(std::uint64_t stream) const {
    return CounterRng(hash(key_, stream ^ 0xA5A5A5A5DEADBEEFULL));
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return hash(key_, counter_++); }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection, so the mapping is exact.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Fisher-Yates from the back.
  template <typename V>
  void shuffle(std::span<V> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace dualstream
