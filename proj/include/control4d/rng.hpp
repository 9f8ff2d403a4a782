#pragma once

#include <cstdint>
#include <initializer_list>

namespace c4d {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive mix of several keys into one seed.
inline uint64_t hash_keys(std::initializer_list<uint64_t> keys) {
  uint64_t h = 0x243f6a8885a308d3ULL;
  for (uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

}  // namespace c4d
