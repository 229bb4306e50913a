#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace emae {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: output j of stream s under key k is a pure
/// function of (k, s, j). Every distribution below is implemented here
/// rather than taken from <random>, whose distributions are not portable
/// across standard libraries.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  constexpr CounterRng(std::uint64_t key, std::uint64_t stream) noexcept
      : key_(mix64(key ^ 0x6A09E667F3BCC909ULL)), stream_(mix64(stream + 0xBB67AE8584CAA73BULL)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    return mix64(key_ + mix64(stream_ + 0x9E3779B97F4A7C15ULL * ++index_));
  }

  std::uint64_t position() const noexcept { return index_; }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound) via rejection on the top of the range.
  std::uint64_t below(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % bound;
  }

  /// Standard normal by Box-Muller (one value per call).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by resampling.
  double truncated_normal(double sigma) noexcept {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return sigma * z;
  }

 private:
  std::uint64_t key_;
  std::uint64_t stream_;
  std::uint64_t index_ = 0;
};

/// Stream identifiers that keep independent consumers of one seed apart.
namespace streams {
inline constexpr std::uint64_t kMask = 0x4D41534BULL;
inline constexpr std::uint64_t kValidationMask = 0x564D534BULL;
inline constexpr std::uint64_t kInit = 0x494E4954ULL;
inline constexpr std::uint64_t kHeadInit = 0x48454144ULL;
inline constexpr std::uint64_t kShuffle = 0x53485546ULL << 20;
inline constexpr std::uint64_t kSplit = 0x53504C54ULL;
inline constexpr std::uint64_t kSynth = 0x53594E54ULL;
}  // namespace streams

}  // namespace emae
