#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rcm {

/// Deterministic RNG. Distributions are implemented by hand because the
/// std:: distribution objects are not bit-reproducible across standard
/// library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<std::mt19937::result_type>(seed)) {}

  uint32_t next_u32() { return gen_(); }

  /// Unbiased integer in [0, n).
  int next_int(int n) {
    uint32_t bound = static_cast<uint32_t>(n);
    uint32_t limit = UINT32_MAX - UINT32_MAX % bound;
    uint32_t r;
    do {
      r = next_u32();
    } while (r >= limit);
    return static_cast<int>(r % bound);
  }

  int next_int(int lo, int hi_inclusive) { return lo + next_int(hi_inclusive - lo + 1); }

  double next_uniform() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  /// Box-Muller, consuming two uniforms per call (spare not cached to keep
  /// the stream position independent of call parity).
  double next_normal(double mean = 0.0, double std = 1.0) {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 < 1e-12) u1 = 1e-12;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + std * z;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derives an independent stream (e.g. per sample or per layer).
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t x = seed * 0x9E3779B97F4A7C15ull + stream + 0x94D049BB133111EBull;
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
  }

 private:
  std::mt19937 gen_;
};

}  // namespace rcm
