#pragma once

#include <cstdint>
#include <random>

namespace combemb {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a purpose-specific stream. Streams derived with different
/// `purpose` tags never share state.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose,
                                    std::uint64_t index = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ purpose) ^ index);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, purpose, index));
}

// Stream tags.
inline constexpr std::uint64_t kStreamMeans = 0x6d65616e;
inline constexpr std::uint64_t kStreamNoise = 0x6e6f6973;
inline constexpr std::uint64_t kStreamSplit = 0x73706c74;
inline constexpr std::uint64_t kStreamPermute = 0x7065726d;
inline constexpr std::uint64_t kStreamSubspace = 0x73756273;
inline constexpr std::uint64_t kStreamKmeans = 0x6b6d6e73;
inline constexpr std::uint64_t kStreamInit = 0x696e6974;
inline constexpr std::uint64_t kStreamSample = 0x73616d70;
inline constexpr std::uint64_t kStreamAugment = 0x6175676d;
inline constexpr std::uint64_t kStreamPretrain = 0x70726574;
inline constexpr std::uint64_t kStreamQuery = 0x71757279;

}  // namespace combemb
