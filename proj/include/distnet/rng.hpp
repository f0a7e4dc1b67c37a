#pragma once

#include <cstdint>
#include <random>

namespace distnet {

/// Seeded 64-bit generator. Distributions are implemented here rather than
/// through <random> so that sequences do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform in (0, 1), safe for logarithms.
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return u;
  }

  double normal();

  /// Index in [0, n).
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  /// Independent child generator; the parent advances by one draw.
  Rng fork(std::uint64_t stream) {
    return Rng(next_u64() ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace distnet
