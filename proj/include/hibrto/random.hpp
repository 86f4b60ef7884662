#pragma once

#include <cstdint>
#include <random>

#include "hibrto/common.hpp"

namespace hibrto {

using Rng = std::mt19937_64;

/// Independent generator for substream `index` under `base_seed`. Used so that
/// parallel work is reproducible regardless of how tasks land on threads.
inline Rng substream(std::uint64_t base_seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x9e3779b9u};
  return Rng(seq);
}

inline Vector standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector z(n);
  for (Index i = 0; i < n; ++i) z[i] = nd(rng);
  return z;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Gamma draw in the shape/rate convention.
inline double gamma_shape_rate(double shape, double rate, Rng& rng) {
  if (!(shape > 0) || !(rate > 0)) throw DomainError("gamma_shape_rate: shape and rate must be positive");
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline std::uint64_t draw_seed(Rng& rng) { return rng(); }

}  // namespace hibrto
