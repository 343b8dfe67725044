#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

#include "calm/stats.hpp"

namespace calm {

// Seed-stream derivation. Every random draw in the project comes from an
// mt19937_64 whose seed is derived from a user seed plus a path of labels,
// so results are independent of thread scheduling and platform.

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_stream(std::uint64_t base,
                                   std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t c : path) s = mix64(s ^ mix64(c));
  return s;
}

/// mt19937_64 wrapper with portable uniform/normal transforms. The standard
/// distributions are implementation-defined, so we do our own.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform on the open interval (0, 1).
  double uniform01() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via the inverse CDF; bitwise reproducible everywhere.
  double normal() { return normal_quantile(uniform01()); }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  /// Fisher-Yates shuffle of [first, last).
  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

  /// Ordered sample of m indices drawn without replacement from [0, n).
  std::vector<std::uint32_t> sample_without_replacement(std::uint32_t n, std::uint32_t m) {
    std::vector<std::uint32_t> pool(n);
    for (std::uint32_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::uint32_t> out;
    out.reserve(m);
    for (std::uint32_t j = 0; j < m && j < n; ++j) {
      const std::uint64_t pick = j + below(n - j);
      std::swap(pool[j], pool[pick]);
      out.push_back(pool[j]);
    }
    return out;
  }

private:
  std::mt19937_64 gen_;
};

}  // namespace calm
