#pragma once

#include <cstdint>
#include <random>

namespace partleak {

/// Seeded random stream. The engine (mt19937_64) is fully specified by the
/// standard; the float conversions below are done by hand because the
/// std distributions are implementation-defined, so draws are identical
/// across platforms for a given (seed, stream).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in (0, 1), never exactly 0 or 1.
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream derived from this stream's identity.
  Rng fork(std::uint64_t child) const { return Rng(seed_, stream_ * 0x9E3779B97F4A7C15ULL + child + 1); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace partleak
