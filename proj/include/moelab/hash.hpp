#pragma once

#include <cstdint>
#include <cstddef>
#include <string>

namespace moelab {

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(uint64_t value);

// FNV-1a over a whole file; throws IoError if the file cannot be read.
uint64_t hash_file(const std::string& path);

}  // namespace moelab
