#pragma once

#include <cstdint>
#include <limits>

namespace crm {

// splitmix64 finalizer; bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic substream derivation: a record/shot stream is addressed by a
// fixed word tuple, never by how many draws other streams consumed.
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a) {
  return mix64(seed ^ mix64(a));
}
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix64(derive_stream(seed, a) ^ mix64(b + 0x9e3779b97f4a7c15ULL));
}
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                                   std::uint64_t c) {
  return mix64(derive_stream(seed, a, b) ^ mix64(c + 0x3c6ef372fe94f82aULL));
}

inline double to_unit_double(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Unbiased-to-2^-64 bounded draw (multiply-shift).
inline std::uint64_t bounded_draw(std::uint64_t x, std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(x) * n) >> 64);
}

// Sequential splitmix64 generator; satisfies UniformRandomBitGenerator.
struct SplitMix {
  std::uint64_t state = 0;
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return mix64(state++); }
};

}  // namespace crm
