#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "rarelens/tensor.hpp"

namespace rarelens {

// Seeded generator; every stochastic step in the library draws from one of
// these so that a run is a pure function of its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next() { return engine_(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draws: std::shuffle's algorithm is
    // unspecified across standard libraries.
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  Tensor normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = normal(0.0, stddev);
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

// 64-bit FNV-1a, mixed with a seed. Used to derive per-token seeds.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Derive an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) { return fnv1a(tag, base + 1); }

}  // namespace rarelens
