#pragma once

#include <cstdint>

namespace lrlab {

// Counter-based generator: every draw is a SplitMix64 finalisation of
// (key, counter), so streams depend only on the seed and the number of
// previous draws. Child streams come from split() and never overlap with the
// parent in practice.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  // Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept;
  // Uniform integer in [0, bound); bound must be > 0.
  std::uint64_t below(std::uint64_t bound) noexcept;

  // Independent stream keyed by this stream's key and `stream_id`. Does not
  // advance this generator.
  Rng split(std::uint64_t stream_id) const noexcept;

 private:
  Rng(std::uint64_t seed, std::uint64_t key) noexcept;

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace lrlab
