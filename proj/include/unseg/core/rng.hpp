#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace unseg {

// splitmix64, used to expand one seed into independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic substream: the same (seed, tag) pair always yields the same
/// generator, independent of call order or thread scheduling.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view tag) {
  std::uint64_t s = seed ^ fnv1a64(tag);
  std::uint64_t a = splitmix64(s);
  std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

inline std::mt19937_64 substream(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  std::uint64_t s = seed ^ fnv1a64(tag);
  s ^= 0x9e3779b97f4a7c15ULL * (index + 1);
  std::uint64_t a = splitmix64(s);
  std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace unseg
