#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sureid {

// All randomness in the project is derived from a single user seed through
// named streams, so runs are reproducible and independent of evaluation
// order (e.g. parallel augmentation workers cannot reorder sampling).

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ull));
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derives an independent engine from (seed, tag, indices...).
inline std::mt19937_64 make_stream(uint64_t seed, std::string_view tag) {
  return std::mt19937_64(hash_mix(seed, hash_str(tag)));
}
inline std::mt19937_64 make_stream(uint64_t seed, std::string_view tag, uint64_t a) {
  return std::mt19937_64(hash_mix(hash_mix(seed, hash_str(tag)), a));
}
inline std::mt19937_64 make_stream(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  return std::mt19937_64(hash_mix(hash_mix(hash_mix(seed, hash_str(tag)), a), b));
}
inline std::mt19937_64 make_stream(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b,
                                   uint64_t c) {
  return std::mt19937_64(hash_mix(hash_mix(hash_mix(hash_mix(seed, hash_str(tag)), a), b), c));
}

}  // namespace sureid
