#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace musegen {

// Deterministic RNG used everywhere. mt19937_64 output is pinned by the
// standard; the distribution transforms below are our own so that streams
// are reproducible independent of the C++ runtime.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform double in [0, 1) with 53 bits of precision.
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (cos branch; two uniforms per draw).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). n must be > 0.
  int64_t randint(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  int64_t randint(int64_t lo, int64_t hi) { return lo + randint(hi - lo); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sattolo's algorithm: a uniformly random cyclic permutation, which is by
  // construction a derangement for n >= 2.
  std::vector<size_t> derangement(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      size_t j = static_cast<size_t>(randint(static_cast<int64_t>(i - 1)));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  // splitmix64 mix for deriving independent stream seeds.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  Rng fork(uint64_t salt) { return Rng(mix(next_u64(), salt)); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace musegen
