#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dsv {

namespace detail {

// splitmix64, used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Seeded RNG with fixed transforms (not the implementation-defined std
/// distributions) so every draw is bit-reproducible across runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(detail::mix64(seed)), eng_(seed_) {}

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t integer(std::uint64_t n) { return eng_() % n; }

  /// Derive an independent substream; `stream` tags the purpose/index.
  /// Forking does not disturb this generator's own sequence.
  Rng fork(std::uint64_t stream) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(stream ^ 0x5851f42d4c957f2dULL)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

}  // namespace dsv
