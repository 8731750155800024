#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace pnet {

// Deterministic splitmix64 generator. One 64-bit word of state makes the
// stream trivially serializable into checkpoints, and the output sequence
// does not depend on the standard library's distribution implementations.
struct Rng {
  uint64_t state = 0x9e3779b97f4a7c15ull;

  explicit Rng(uint64_t seed = 0) : state(seed + 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound). Bound is tiny here (shuffles, rotation
  // draws), so the modulo bias at 2^64 scale is irrelevant.
  uint64_t below(uint64_t bound) { return next_u64() % bound; }

  // Standard normal via Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

// Named substream derivation: one user-facing seed fans out into
// independent streams (init / shuffle / augment / dropout) so that e.g.
// toggling augmentation does not perturb weight initialization.
inline uint64_t substream_seed(uint64_t seed, std::string_view name) {
  uint64_t h = 1469598103934665603ull ^ seed;
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  h ^= seed >> 32;
  h *= 1099511628211ull;
  return h;
}

}  // namespace pnet
