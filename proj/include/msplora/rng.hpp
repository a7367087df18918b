#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace msplora {

// SplitMix64 (Steele/Lea/Flood). The update rule below is the whole
// algorithm, so streams reproduce bit-for-bit on any platform regardless
// of the standard library's engine implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// Derives an independent sub-stream seed from a base seed and a tag path,
// e.g. derive_seed(seed, {tier, layer, kind}). Same path -> same stream.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> words) {
  SplitMix64 mix(base);
  std::uint64_t s = mix.next();
  for (std::uint64_t w : words) {
    SplitMix64 step(s ^ (w + 0x9E3779B97F4A7C15ULL));
    s = step.next();
  }
  return s;
}

// Deterministic double streams on top of SplitMix64. Gaussians come from the
// Box-Muller transform rather than std::normal_distribution, whose output
// sequence is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_.next(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_.next() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  // Unbiased integer in [0, n); rejection sampling avoids modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = gen_.next();
    while (v >= limit) v = gen_.next();
    return v % n;
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  SplitMix64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace msplora
