#pragma once

#include <cstdint>
#include <random>

#include "geohmc/types.hpp"

namespace geohmc {

/// Purpose tags for deriving independent generator streams from one root seed.
/// Streams are keyed by (root, stream, index) so that serial and parallel
/// execution consume identical randomness.
enum class Stream : std::uint64_t {
  Data = 1,
  Momentum = 2,
  MhUniform = 3,
  Proposal = 4,
  StabilityCell = 5,
};

namespace detail {

// SplitMix64 finalizer, used as the mixing function for stream derivation.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::uint64_t mix_seed(std::uint64_t root, Stream stream,
                              std::uint64_t index) {
  std::uint64_t h = detail::splitmix64(root);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(stream));
  h = detail::splitmix64(h ^ index);
  return h;
}

inline std::mt19937_64 make_stream(std::uint64_t root, Stream stream,
                                   std::uint64_t index = 0) {
  return std::mt19937_64(mix_seed(root, stream, index));
}

template <typename Scalar, typename Rng>
Vector<Scalar> standard_normal_vector(Rng& rng, Index dim) {
  std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
  Vector<Scalar> z(dim);
  for (Index i = 0; i < dim; ++i) z[i] = normal(rng);
  return z;
}

}  // namespace geohmc
