#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace fb {

// PCG32 (O'Neill's pcg32 generator, the "oneseq" variant with a settable
// stream). State transition: state = state * 6364136223846793005 + inc;
// output is the xorshifted-rotated high bits of the previous state. The
// same (seed, stream) pair reproduces the same draw sequence on any
// platform, which is what checkpoint fixtures and tests rely on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0x14057b7ef767814full) {
    state_ = 0u;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Unbiased draw in [0, bound) via rejection (Lemire-free classic method).
  std::uint32_t next_below(std::uint32_t bound) {
    const std::uint32_t threshold = static_cast<std::uint32_t>(-bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform in the open interval (0, 1); never returns 0 or 1, so it is
  // safe under log().
  double next_unit() { return (static_cast<double>(next_u32()) + 0.5) * 0x1p-32; }

  // Standard normal via Box-Muller. Draws two uniforms, emits the cosine
  // branch first and caches the sine branch.
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
  }

  double next_normal(double mean, double stddev) { return mean + stddev * next_normal(); }

  // Deterministic Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = next_below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fb
