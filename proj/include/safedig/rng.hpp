#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "safedig/tensor.hpp"

namespace safedig {

// Counter-based generator keyed by (seed, stream). Each draw hashes the
// (seed, stream, counter) triple, so identical seeds reproduce identical
// sequences across runs and platforms, and distinct streams never interact.
// Single-owner: clone a substream for parallel work instead of sharing.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  SeededRng substream(std::uint64_t k) const {
    return SeededRng(seed_, mix(stream_ ^ mix(k ^ 0xa5a5a5a5a5a5a5a5ull)));
  }

  std::uint64_t next_u64() {
    return mix(seed_ ^ mix(stream_ ^ mix(counter_++)));
  }

  // Uniform draw in the open interval (0, 1).
  double uniform() {
    std::uint64_t bits = next_u64() >> 11;  // 53 bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via the Marsaglia polar method; the spare draw is cached.
  float gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = static_cast<float>(v * m);
    has_spare_ = true;
    return static_cast<float>(u * m);
  }

  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

inline Tensor seeded_gaussian(SeededRng& rng, std::vector<std::size_t> shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian();
  return t;
}

inline Tensor seeded_uniform(SeededRng& rng, std::vector<std::size_t> shape,
                             float lo, float hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = lo + static_cast<float>(rng.uniform()) * (hi - lo);
  }
  return t;
}

// Fisher-Yates over [0, n); used for deterministic epoch shuffles.
inline std::vector<std::size_t> seeded_permutation(SeededRng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace safedig
