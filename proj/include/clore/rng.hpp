#pragma once

#include <array>
#include <cstdint>

namespace clore {

// Deterministic generator used everywhere randomness is needed, specified
// exactly so a second implementation in another language reproduces the
// same streams bit for bit.
//
// Seeding: the four 64-bit state words are the first four outputs of
// splitmix64 started at the seed value, where one splitmix64 step is
//
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   output = z ^ (z >> 31)
//
// Generation: xoshiro256++. One step produces
//
//   result = rotl64(s0 + s3, 23) + s0
//   t = s1 << 17
//   s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3;  s2 ^= t
//   s3 = rotl64(s3, 45)
//
// Derived draws:
//   next_double()       = (next_u64() >> 11) * 2^-53, uniform in [0, 1)
//   next_below(n)       = next_u64() % n
//   next_signed_unit()  = 2 * next_double() - 1, uniform in [-1, 1)
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  double next_signed_unit() { return 2.0 * next_double() - 1.0; }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

  static uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
};

}  // namespace clore
