#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace urnng {

/// All randomness flows through explicitly passed engines of this type so that
/// (seed, config, data) determine every result.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits; independent of the standard
/// library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Draws an index from unnormalized non-negative weights.
inline std::size_t categorical(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0) || !std::isfinite(total)) throw std::invalid_argument("categorical: weights do not sum to a positive value");
  double u = uniform01(rng) * total;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    u -= weights[k];
    if (u < 0.0) return k;
  }
  // Rounding can leave u marginally positive; return the last index with mass.
  for (std::size_t k = weights.size(); k-- > 0;)
    if (weights[k] > 0.0) return k;
  return weights.size() - 1;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

template <class It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw std::runtime_error("invalid RNG state");
}

}  // namespace urnng
