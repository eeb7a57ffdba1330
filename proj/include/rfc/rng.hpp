#pragma once

#include <cstdint>

namespace rfc {

// Counter-based deterministic generator (SplitMix64 mixing). Every random
// draw in the library goes through this so runs are bit-stable across
// platforms; std:: distributions are implementation-defined and would not be.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix64(seed ^ 0x9e3779b97f4a7c15ull)) {}

  // Derive an independent stream keyed by up to three indices. Used by the
  // synthetic generator so frame content depends only on (seed, id, tracklet,
  // frame), never on draw order.
  static Rng keyed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                   std::uint64_t c = 0) {
    std::uint64_t s = mix64(seed + 0x9e3779b97f4a7c15ull);
    s = mix64(s ^ mix64(a + 0xbf58476d1ce4e5b9ull));
    s = mix64(s ^ mix64(b + 0x94d049bb133111ebull));
    s = mix64(s ^ mix64(c + 0xd6e8feb86659fd93ull));
    return Rng(raw{}, s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

 private:
  struct raw {};
  Rng(raw, std::uint64_t s) : state_(s) {}

  static std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace rfc
