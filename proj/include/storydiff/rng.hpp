#pragma once

#include <cstdint>

namespace storydiff {

/// splitmix64 stream. Every random decision in the project is drawn from a
/// tree of these, so a single master seed pins all outputs.
class RngStream {
 public:
  explicit RngStream(std::uint64_t state = 0) : state_(state) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// child(tag) = RngStream(next() of a stream seeded with state ^ tag).
  /// Does not advance this stream.
  RngStream child(std::uint64_t tag) const {
    RngStream seeded(state_ ^ tag);
    return RngStream(seeded.next());
  }

  std::uint64_t state() const { return state_; }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by 128-bit multiply-high (n > 0).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  float normal();

 private:
  std::uint64_t state_;
};

}  // namespace storydiff
