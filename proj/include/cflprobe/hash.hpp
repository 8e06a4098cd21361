#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace cflprobe {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

template <typename T>
std::uint64_t fnv1a_values(std::span<const T> values, std::uint64_t h = kFnvOffset) {
  for (T v : values) {
    auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < static_cast<int>(sizeof(T)); ++i) {
      h ^= (u >> (8 * i)) & 0xff;
      h *= kFnvPrime;
    }
  }
  return h;
}

/// splitmix64 finalizer; used to derive independent RNG seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return mix64(mix64(seed ^ mix64(stream)) ^ mix64(index + 0x5851f42d4c957f2dULL));
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = kDigits[v & 0xf];
  return s;
}

}  // namespace cflprobe
