#pragma once

#include <cstdint>

namespace ood {

// Deterministic stream splitting: one base seed fans out into independent
// seeds for init, shuffling, ensemble members and so on (splitmix64 step).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

} // namespace ood
