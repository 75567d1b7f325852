#pragma once

#include <cmath>
#include <cstdint>

namespace drseg {

// Deterministic counter-free PRNG (splitmix64 core). We do not use the
// <random> distributions because their output is implementation-defined;
// seeded runs must reproduce bit-identically wherever the suite is built.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one draw per call; pair cached).
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  int range(int lo, int hi) {  // inclusive bounds
    if (hi <= lo) return lo;
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  // Derive an independent stream; used to decorrelate per-sample /
  // per-view seeds from a parent seed.
  Rng split(uint64_t salt) {
    uint64_t s = next_u64();
    return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace drseg
