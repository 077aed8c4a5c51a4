#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedmoe {

using Rng = std::mt19937_64;

/// Deterministically derives a child seed from a base seed and a list of
/// tags (round index, client id, stream id, ...). std::seed_seq's mixing is
/// fully specified by the standard, so results are portable.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * tags.size());
  auto push64 = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push64(base);
  for (std::uint64_t t : tags) push64(t);
  std::seed_seq seq(words.begin(), words.end());
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

// Well-known stream tags, so that unrelated consumers of one base seed never
// share a random sequence.
namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t partition = 2;
inline constexpr std::uint64_t sampling = 3;
inline constexpr std::uint64_t local_update = 4;
inline constexpr std::uint64_t split = 5;
inline constexpr std::uint64_t personalize = 6;
inline constexpr std::uint64_t synthetic = 7;
}  // namespace stream

}  // namespace fedmoe
