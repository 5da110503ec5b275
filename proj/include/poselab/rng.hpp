#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace poselab {

// mt19937_64 engine with hand-rolled distributions. The engine's output
// sequence is pinned by the standard; distribution implementations are not,
// so uniform/normal/shuffle are done by hand for cross-version determinism.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53 random bits
  double unit() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // Box-Muller, no cached spare (two draws per call, deterministic order)
  double normal(double mu = 0.0, double sigma = 1.0) {
    double u1 = unit(), u2 = unit();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(2.0 * M_PI * u2);
  }

  // inclusive range
  int uniform_int(int lo, int hi) {
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  // Shoemake subgroup algorithm: uniform over SO(3) via unit quaternion
  std::array<double, 4> unit_quaternion() {
    double u1 = unit(), u2 = unit(), u3 = unit();
    double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    return {a * std::sin(2.0 * M_PI * u2), a * std::cos(2.0 * M_PI * u2),
            b * std::sin(2.0 * M_PI * u3), b * std::cos(2.0 * M_PI * u3)};
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// splitmix64 finalizer; used to derive stream seeds from (seed, tags)
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix64(mix64(mix64(base ^ a) ^ b) ^ c);
}

}  // namespace poselab
