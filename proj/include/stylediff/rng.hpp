#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace stylediff {

// Deterministic random stream with hierarchical splitting.
//
// Every consumer of randomness (dataset generation, weight init, per-sample
// noise, ...) gets its own child stream derived from (parent seed, label).
// Child streams are independent of the parent's draw position, so adding a
// draw in one subsystem never shifts the values seen by another.  All
// distributions are implemented on top of raw 64-bit draws; we never rely on
// std::uniform_real_distribution and friends, whose output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(mix_(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).  n must be positive.
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller.  Always consumes exactly two uniforms so
  // the stream layout is easy to reason about.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Child stream for a named subsystem.  Depends only on this stream's seed
  // and the label, not on how many values were drawn so far.
  Rng split(std::string_view label) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ull;
    }
    return Rng(mix_(seed_ ^ h));
  }

  Rng split(std::uint64_t salt) const {
    return Rng(mix_(seed_ ^ (salt * 0x9e3779b97f4a7c15ull + 0x7f4a7c15ull)));
  }

 private:
  // splitmix64 finalizer; decorrelates nearby seeds.
  static std::uint64_t mix_(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace stylediff
