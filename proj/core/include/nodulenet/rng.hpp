#pragma once

#include <cstdint>

namespace nodulenet {

/// Counter-based random stream. Every draw is a pure function of
/// (seed, counter), so a stream can be copied, replayed or forked without
/// any hidden global state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t index(std::uint64_t n) noexcept;

  /// Independent child stream keyed by `stream_id`.
  RngStream fork(std::uint64_t stream_id) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace nodulenet
