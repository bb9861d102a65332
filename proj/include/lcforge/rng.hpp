#pragma once

#include <cstdint>
#include <initializer_list>

namespace lcforge {

// Reproducibility contract: experiments and checkpoints must replay across
// builds, so the generator is pinned to a documented algorithm instead of
// the implementation-defined std::uniform_* machinery.
//
//   state derivation  splitmix64 (Steele et al.), one finalizer pass per key
//   stream generator  xoshiro256++ (Blackman & Vigna), state filled by
//                     successive splitmix64 outputs
//   real mapping      53 high bits -> [0,1), computed in double, then cast
//
// Substreams come from derive_seed(seed, key); independent layers/epochs/
// batches each get their own key chain.

namespace detail {

inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

/// Mixes a subkey into a seed; chaining keys yields independent streams.
inline uint64_t derive_seed(uint64_t seed, uint64_t key) {
  uint64_t s = seed ^ (0x9E3779B97F4A7C15ULL * (key + 0x632BE59BD9B4E019ULL));
  return detail::splitmix64_next(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& word : s_) word = detail::splitmix64_next(sm);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> keys) {
    for (uint64_t k : keys) seed = derive_seed(seed, k);
    return Rng(seed);
  }

  /// Independent child stream keyed off the seed this stream was built from.
  Rng split(uint64_t key) const { return Rng(derive_seed(seed_, key)); }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl64(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n). Bias is below 2^-64 per draw.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return next_double() < p; }

 private:
  uint64_t s_[4];
  uint64_t seed_;
};

}  // namespace lcforge
