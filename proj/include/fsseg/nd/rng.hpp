#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace fsseg::nd {

// Deterministic RNG. All sampling goes through hand-rolled transforms of the
// mt19937_64 bit stream; std:: distributions are implementation-defined and
// would break the bit-reproducibility contract.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) {
    return n <= 0 ? 0 : static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Normal clipped to +-clip standard deviations by resampling.
  double trunc_normal(double stddev, double clip = 2.0) {
    double z = normal();
    while (std::abs(z) > clip) z = normal();
    return z * stddev;
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

  // Derive a decorrelated child seed (splitmix64 finalizer over seed ^ tag).
  static uint64_t mix(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fsseg::nd
