#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace gsnr {

// All randomness in a run flows from one global seed through named
// sub-streams, so individual components (backbone init, each member's
// adapter init and shuffle order, selection, t-SNE) can be re-seeded
// independently without disturbing the others.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Derive the seed of a named sub-stream from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stream) {
  return splitmix64(base ^ fnv1a64(stream));
}

/// Derive the seed of an indexed sub-stream, e.g. ("member_init", m).
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stream,
                                 std::uint64_t index) {
  return splitmix64(derive_seed(base, stream) + 0x9E3779B97F4A7C15ull * (index + 1));
}

/// Deterministic random stream. mt19937_64 is fully specified by the
/// standard; the normal sampler is hand-rolled (Box-Muller) because
/// std::normal_distribution is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_below(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller. One value per call; the pair's
  /// second half is discarded to keep the stream position predictable.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates shuffle with this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices sampled uniformly from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    shuffle(pool);
    pool.resize(std::min(k, n));
    return pool;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace gsnr
