#pragma once

#include <cstdint>
#include <random>

namespace wcox {

using Engine = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for stream `index` under `master`. Streams for distinct indices are
/// decorrelated, so replicates can be generated in any order.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return mix64(mix64(master) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

inline Engine make_engine(std::uint64_t seed) { return Engine(mix64(seed)); }

/// Uniform draw on (0, 1].
inline double uniform_open0(Engine& eng) {
  return 1.0 - std::generate_canonical<double, 64>(eng);
}

}  // namespace wcox
