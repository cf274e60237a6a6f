#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace delia {

// Deterministic, platform-independent PRNG. std::mt19937 plus the standard
// distributions would be implementation-defined, which breaks byte-identical
// reruns, so all randomness in the project flows through this type.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, no cached state so streams stay simple
  double normal(double mu = 0.0, double sigma = 1.0);

  // unbiased-enough bounded draw (Lemire multiply-shift)
  uint64_t bounded(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<size_t>(bounded(v.size()))];
  }

  size_t pick_index(const std::vector<double>& weights);

  // independent child stream; tag keeps derivations order-insensitive
  Rng derive(std::string_view tag) const;

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

}  // namespace delia
