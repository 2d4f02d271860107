#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace ctrldec {

// SplitMix64 finalizer; used only to derive independent seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
  return mix64(mix64(mix64(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

/// Caller-owned random stream.
///
/// The engine is std::mt19937_64, whose output sequence the standard fixes
/// exactly, and uniforms are built from the top 53 bits by hand. Together this
/// makes every draw reproducible across standard libraries, which the
/// byte-identical sweep output relies on. std::*_distribution is never used.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t draws() const noexcept { return draws_; }

  /// Uniform double in [0, 1).
  double uniform() {
    ++draws_;
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n) {
    auto i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  void discard(std::uint64_t n) {
    for (std::uint64_t i = 0; i < n; ++i) uniform();
  }

  /// Independent substream keyed by (root seed, a, b). Does not advance this stream.
  RandomStream substream(std::uint64_t a, std::uint64_t b = 0) const {
    return RandomStream(derive_seed(seed_, a, b));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

/// Inverse-CDF draw: consumes exactly one uniform. Never returns a zero-mass index.
inline std::size_t sample_index(std::span<const double> probs, RandomStream& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = i;
    cdf += probs[i];
    if (u < cdf) return i;
  }
  return last_positive;  // rounding slack
}

/// Fisher-Yates on top of RandomStream so the permutation is portable.
template <class T>
void shuffle_in_place(std::vector<T>& items, RandomStream& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = rng.uniform_index(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace ctrldec
