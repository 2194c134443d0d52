#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace ddit {

// Seeded random stream. Draws never cache state outside the engine, so
// save()/load() captures everything needed to resume a sequence exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t next_u64() { return engine_(); }

  // Independent child stream keyed by `tag`.
  Rng split(std::uint64_t tag);

  std::string save() const;
  void load(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; used to derive seeds from (seed, tag) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace ddit
