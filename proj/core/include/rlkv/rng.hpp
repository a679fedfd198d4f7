#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace rlkv {

// Deterministic PRNG with hand-rolled distributions. The standard library's
// distribution objects are implementation-defined, so sampling through them
// would not reproduce across toolchains; everything below is pinned.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  // splitmix64 step
  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
    // rejection sampling to avoid modulo bias
    std::uint64_t limit = ~0ull - (~0ull % n + 1) % n;
    std::uint64_t v = next_u64();
    while (v > limit) v = next_u64();
    return v % n;
  }

  int next_int(int lo, int hi) {  // inclusive range [lo, hi]
    if (lo > hi) throw std::invalid_argument("Rng::next_int: empty range");
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // standard normal via Box-Muller (one value per call, no cached spare)
  double next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-12) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Fisher-Yates shuffle
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), order randomized
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw std::invalid_argument("Rng: sample size out of range");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    shuffle(idx);
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }

 private:
  std::uint64_t state_;
};

// Stable way to derive independent stream seeds from one master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  Rng r(master ^ (stream * 0xd1342543de82ef95ull) ^ (index * 0xaf251af3b0f025b5ull));
  return r.next_u64();
}

}  // namespace rlkv
