#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace iir {

using Rng = std::mt19937_64;

// splitmix64 finaliser; used to derive independent per-example streams.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(base);
  for (auto p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

template <typename T>
void fill_normal(Rng& rng, std::span<T> out) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace iir
