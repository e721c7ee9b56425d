#pragma once
// Deterministic random streams shared by data generation, initialization,
// projection sampling and Gumbel noise.
//
// The generator is xoshiro256++ seeded through splitmix64. Both algorithms are
// specified here bit for bit so that another implementation reproduces the
// exact same streams:
//
//   splitmix64:  s += 0x9e3779b97f4a7c15
//                z = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9
//                z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//                return z ^ (z >> 31)
//
//   xoshiro256++ (reference: https://prng.di.unimi.it/xoshiro256plusplus.c)
//     state words s[0..3] = four consecutive splitmix64 outputs of the seed.
//
//   uniform()    = (next() >> 11) * 2^-53                 in [0, 1)
//   normal()     = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)     (Box-Muller, one
//                  output per call, u1 drawn before u2)
//   below(n)     = next() % n                             (modulo bias is
//                  below 2^-40 for the small n used here)

#include <cmath>
#include <cstdint>
#include <numbers>

namespace iqvae {

struct SplitMix64 {
  std::uint64_t state = 0;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& w : s_) w = sm.next();
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) { return next() % n; }

  // Integer in [lo, hi].
  int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1))); }

  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream; used to give each run component its own sequence.
  Rng fork(std::uint64_t salt) {
    return Rng(next() ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4] = {0, 0, 0, 0};
};

}  // namespace iqvae
