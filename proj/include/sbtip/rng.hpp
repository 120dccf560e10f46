#pragma once

#include <array>
#include <cstdint>

namespace sbtip {

/// Philox4x64-10 block function (Salmon et al., Random123). Counter-based:
/// output depends only on (counter, key), which gives independent,
/// reproducible streams without shared state.
std::array<std::uint64_t, 4> philox4x64(std::array<std::uint64_t, 4> counter,
                                        std::array<std::uint64_t, 2> key);

/// Stream identifiers keep draws for different purposes disjoint even when
/// they share a seed and a trajectory index.
enum class StreamPurpose : std::uint64_t {
  InitialState = 1,
  Increments = 2,
  Probes = 3,
  Sampling = 4,
  Initialization = 5,
  Generic = 6,
};

/// Sequential view over one Philox stream, keyed by (seed, purpose) and
/// indexed by `stream` (usually a trajectory or sample id).
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream,
               StreamPurpose purpose = StreamPurpose::Generic);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; values come in cached pairs.
  double normal();
  /// +1 or -1 with equal probability.
  double rademacher();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  void refill();

  std::array<std::uint64_t, 2> key_;
  std::array<std::uint64_t, 4> counter_;
  std::array<std::uint64_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives a child seed from a master seed and an index (SplitMix64 mix).
/// Used to give sweep children independent but reproducible seeds.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace sbtip
