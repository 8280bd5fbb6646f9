#include "nodulenet/rng.hpp"

#include <cmath>
#include <numbers>

namespace nodulenet {

std::uint64_t mix64(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t RngStream::next_u64() noexcept {
  const std::uint64_t key = mix64(seed_);
  return mix64(key ^ mix64(counter_++ * 0xD1B54A32D192ED03ULL));
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::index(std::uint64_t n) noexcept {
  const auto wide = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(wide >> 64);
}

RngStream RngStream::fork(std::uint64_t stream_id) const noexcept {
  return RngStream(mix64(seed_ ^ mix64(stream_id + 0x632BE59BD9B4E019ULL)), 0);
}

}  // namespace nodulenet
