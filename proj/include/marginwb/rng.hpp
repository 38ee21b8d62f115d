#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mw {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to fan a single run seed out to independent streams.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based sub-seed: the same (seed, stage, counter) always yields the
/// same stream, independent of the order in which stages run.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage,
                                    std::uint64_t counter = 0) noexcept {
  return mix64(mix64(seed ^ hash_tag(stage)) + counter);
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

}  // namespace mw
