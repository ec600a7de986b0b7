#pragma once

#include <cstdint>
#include <random>

namespace emcurve {

using Rng = std::mt19937_64;

/// Independent stream for (master seed, index, purpose). std::seed_seq is
/// fully specified by the standard, so streams match across platforms.
inline Rng derive_stream(std::uint64_t master, std::uint64_t index, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), purpose};
  return Rng(seq);
}

// Stream purposes.
inline constexpr std::uint32_t kStreamTrial = 1;
inline constexpr std::uint32_t kStreamPerturbation = 2;
inline constexpr std::uint32_t kStreamOracle = 3;

}  // namespace emcurve
