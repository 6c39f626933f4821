#pragma once

#include <cstdint>
#include <string_view>

namespace rcnf {

// Seed splitting: every command takes one --seed; sub-streams are derived as
// splitmix64(seed ^ fnv1a(label)). Labels are fixed strings such as
// "gen/task03/none/7" or "train/shuffle", so adding a stream never perturbs
// the others.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ fnv1a(label));
}

}  // namespace rcnf
