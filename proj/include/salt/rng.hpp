#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace salt {

// Deterministic splittable generator. The base algorithm is SplitMix64
// (Steele/Lea/Flood mixing constants); child streams are derived by hashing a
// purpose label (FNV-1a 64) or an index into the parent's base seed, so every
// consumer of randomness in the repo owns an independent, replayable stream.
// Uniform doubles use the top 53 bits; normals use Box-Muller (cosine branch);
// gamma uses Marsaglia-Tsang. All draws are bit-reproducible for a given seed
// on any platform with IEEE-754 doubles and the same libm.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Child stream; does not consume from or advance this stream.
  Rng derive(std::string_view label) const;
  Rng derive(std::uint64_t index) const;

  std::uint64_t next_u64();
  double next_double();              // uniform in [0,1)
  double next_normal();              // standard normal
  std::uint64_t next_below(std::uint64_t n);  // uniform in [0,n), unbiased
  double next_gamma(double alpha);   // alpha > 0
  void next_dirichlet(double concentration, std::span<double> out);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t mix(std::uint64_t x);
  static std::uint64_t fnv1a(std::string_view s);

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace salt
