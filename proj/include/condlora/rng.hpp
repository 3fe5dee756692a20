#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "condlora/matrix.hpp"

namespace condlora {

// Counter-based SplitMix64. Draw k (0-based) of stream `seed` is
//   mix64(seed + (k + 1) * 0x9E3779B97F4A7C15)
// with mix64 the SplitMix64 finalizer. Uniforms take the top 53 bits.
// Normals use Box-Muller on consecutive draw pairs (u1, u2):
//   z0 = sqrt(-2 ln(1 - u1)) cos(2 pi u2),  z1 = ... sin(2 pi u2)
// and are consumed z0 then z1.

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Independent child seed for a named sub-stream.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix64(seed ^ mix64(stream + kGoldenGamma));
}

class Rng {
public:
  explicit constexpr Rng(std::uint64_t seed) noexcept : seed_(seed) {}

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(seed_ + counter_ * kGoldenGamma);
  }

  /// Uniform in [0, 1).
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept { return next_u64() % n; }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Matrix with i.i.d. normal(mean, std) entries, filled row-major from stream `seed`.
inline Matrix gaussian(std::size_t rows, std::size_t cols, double mean, double std,
                       std::uint64_t seed) {
  if (!(std >= 0.0)) throw ConfigError("gaussian: std must be non-negative");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = mean + std * rng.normal();
  return m;
}

} // namespace condlora
