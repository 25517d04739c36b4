#pragma once

#include <array>
#include <cstdint>

namespace sosd {

// Deterministic xoshiro256++ stream, state seeded through splitmix64.
// Both algorithms are the published reference versions (Blackman & Vigna),
// so a given seed produces the same u64 stream on every platform.
// Gaussian draws use Box-Muller (libm sin/cos), not std::normal_distribution,
// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [lo, hi] inclusive. Uses rejection sampling so the
  // distribution is exact and the stream consumption is seed-stable.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();
  double normal(double mean, double stddev);

  bool bernoulli(double p);

  // Independent stream derived from (seed, tag, index) with splitmix64 mixing.
  // Used for per-scene / per-step substreams so that resuming a run never
  // needs serialized generator state.
  static Rng substream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index);

 private:
  std::array<std::uint64_t, 4> state_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

// Stream tags for substream derivation. Values are stable: they take part in
// seeding, so reordering the enum would change generated data.
namespace rng_tag {
inline constexpr std::uint64_t kScene = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kAugment = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kHoles = 5;
}  // namespace rng_tag

}  // namespace sosd
