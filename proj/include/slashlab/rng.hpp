#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace slashlab {

/// Seeded random stream.
///
/// Engine: std::mt19937_64.
///   - uniform(): top 53 bits of one engine draw, scaled to [0, 1).
///   - normal():  Marsaglia polar method, caching the second variate.
///   - categorical(): inverse CDF on one uniform() draw.
/// derive_seed() is a SplitMix64 mix of (seed, tag hash, index).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double normal();
  std::size_t categorical(std::span<const double> probs);

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                   std::uint64_t index);

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace slashlab
