#pragma once

#include <cstdint>
#include <string_view>

namespace krrmix {

/// SplitMix64 output finalizer.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over bytes; used for stream names and digests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

/// Counter-based generator: draw n of stream (seed, stream) is
/// mix64(key + n * golden), key = mix64(seed ^ mix64(stream)). Integer draws
/// are identical on every platform; streams split without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  /// Independent child stream, e.g. one per (purpose, step).
  Rng split(std::uint64_t substream) const;
  Rng split(std::string_view name) const { return split(fnv1a64(name)); }

  std::uint64_t next_u64();
  /// Uniform in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller, one value per two draws).
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace krrmix
