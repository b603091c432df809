#pragma once

// Seed splitting. Every random quantity in the library is drawn from a
// substream identified by (seed, stream tag, index), so results do not depend
// on call order or on how work is distributed over threads.

#include <cstdint>
#include <random>

namespace cpbounds {

enum class StreamTag : std::uint64_t {
  kGeometry = 0x67656f6dULL,
  kNoise = 0x6e6f6973ULL,
  kPhaseBias = 0x70686173ULL,
  kIntegerErrors = 0x696e7465ULL,
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// seed' = splitmix(splitmix(splitmix(seed) ^ tag) ^ index)
inline std::uint64_t derive_seed(std::uint64_t seed, StreamTag tag, std::uint64_t index) noexcept {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  return splitmix64(h ^ index);
}

inline std::mt19937_64 substream(std::uint64_t seed, StreamTag tag, std::uint64_t index) {
  return std::mt19937_64(derive_seed(seed, tag, index));
}

}  // namespace cpbounds
