#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace flat {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream for a (root, tag...) path, e.g. (seed, round, client).
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(root);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(derive_seed(root, tags));
}

// Stream purposes, so unrelated draws never share a generator.
namespace stream {
inline constexpr std::uint64_t kSample = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kAttack = 3;
inline constexpr std::uint64_t kDefense = 4;
inline constexpr std::uint64_t kEval = 5;
inline constexpr std::uint64_t kInit = 6;
inline constexpr std::uint64_t kData = 7;
}  // namespace stream

}  // namespace flat
