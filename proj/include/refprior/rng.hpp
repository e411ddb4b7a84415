#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace refprior {

// Deterministic random source.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. Distributions are implemented here (not with <random>
// distributions, whose algorithms are implementation-defined) so that the same
// seed produces the same draws on every platform:
//
//   uniform()      = (engine() >> 11) * 2^-53          in [0, 1)
//   uniform_int(n) = rejection-sampled engine() mod n  in [0, n)
//   normal()       = Box-Muller on two uniform() draws
//
// Independent streams are derived with derive_seed(seed, label, index), a
// SplitMix64 mix of the parent seed, an FNV-1a hash of the label, and the index.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                          std::uint64_t index = 0);

}  // namespace refprior
