#pragma once

#include <array>
#include <cstdint>

namespace gasp {

/// Philox4x32-10 block function. Pure: output depends only on (counter, key).
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// Independent stream families. Each sub-generator draws from its own domain
/// so that streams never overlap across generators.
enum class StreamDomain : std::uint8_t {
  kRay = 0,
  kOccNegative = 1,
  kOccPositive = 2,
  kMissingRay = 3,
  kFeature = 4,
  kFeatureSubsample = 5,
  kEgoPositive = 6,
  kEgoNegative = 7,
  kAugment = 8,
  kShuffle = 9,
  kTrain = 10,
  kInit = 11,
  kSuite = 12,
  kPcaSubset = 13,
  kSample = 14,
};

/// Counter-based random stream keyed by (seed, stream id). The n-th draw is a
/// pure function of (seed, stream, n), so any number of workers visiting
/// streams in any order produce identical values.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t first_draw = 0)
      : seed_(seed), stream_(stream), next_(first_draw) {}

  /// 64 random bits of draw `index`.
  std::uint64_t bits_at(std::uint64_t index) const;
  /// Uniform double in [0, 1) for draw `index` (53-bit resolution).
  double uniform_at(std::uint64_t index) const;

  std::uint64_t next_bits() { return bits_at(next_++); }
  double uniform() { return uniform_at(next_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (consumes two draws).
  double normal();

  std::uint64_t position() const { return next_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t next_;
};

/// Stream id for a given domain and index (index uses the low 56 bits).
constexpr std::uint64_t stream_id(StreamDomain domain, std::uint64_t index) {
  return (static_cast<std::uint64_t>(domain) << 56) | (index & ((std::uint64_t{1} << 56) - 1));
}

/// The per-ray stream used by every ray-indexed sampler.
inline RandomStream per_ray_rng(std::uint64_t seed, std::uint64_t ray_index,
                                StreamDomain domain = StreamDomain::kRay) {
  return RandomStream(seed, stream_id(domain, ray_index));
}

}  // namespace gasp
