#pragma once

#include <cmath>
#include <cstdint>

namespace stx {

// Counter-based deterministic RNG (splitmix64 core). Substreams are derived
// by mixing stream labels into the key, so draws are independent of thread
// scheduling and call interleaving: the same (seed, labels) always produces
// the same sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  // Derived substream; does not advance this stream.
  Rng stream(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    Rng r(0);
    uint64_t s = state_;
    s = mix(s ^ mix(a + 0x6a09e667f3bcc909ull));
    s = mix(s ^ mix(b + 0xbb67ae8584caa73bull));
    s = mix(s ^ mix(c + 0x3c6ef372fe94f82bull));
    r.state_ = s;
    return r;
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (single value per pair of draws, so the
  // stream has no hidden cache state).
  double gaussian() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }
  uint64_t state_;
};

}  // namespace stx
