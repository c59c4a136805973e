// Seed derivation so every component draws from its own stable stream.
#pragma once

#include <cstdint>
#include <string_view>

namespace gmic {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Stream seed for (root seed, label, index); independent of call order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + index);
}

}  // namespace gmic
