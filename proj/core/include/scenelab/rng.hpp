#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

namespace scenelab {

// Deterministic random stream: xoshiro256++ seeded through splitmix64.
// The same 64-bit seed yields the same uint64 stream on every platform.
//
// Child streams are derived from the *seed*, not the current state, so
// splitting is independent of how much the parent has been consumed:
//   child_seed = splitmix64(parent_seed ^ fnv1a64(label))
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // [0, 1)
  double uniform();
  // [lo, hi)
  double uniform(double lo, double hi);
  // Unbiased integer in [0, n), n >= 1.
  uint64_t uniform_int(uint64_t n);
  // Standard normal via Box-Muller (pairwise, second value cached).
  double normal();
  double normal(double mean, double sd);

  Rng split(uint64_t stream) const;
  Rng split(std::string_view label) const;

  uint64_t seed() const { return seed_; }

  // Full stream state, save/restore for checkpointing.
  std::array<uint64_t, 6> state() const;
  void set_state(const std::array<uint64_t, 6>& s);

  // In-place Fisher-Yates; spelled out so the permutation is
  // platform-independent (std::shuffle is not).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(uniform_int(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  std::vector<size_t> permutation(size_t n);

 private:
  uint64_t seed_;
  std::array<uint64_t, 4> s_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

uint64_t splitmix64(uint64_t& state);
uint64_t fnv1a64(std::string_view bytes);

}  // namespace scenelab
