#include "salt/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace salt {

std::uint64_t Rng::mix(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t Rng::fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

Rng Rng::derive(std::string_view label) const { return Rng(mix(seed_ ^ fnv1a(label))); }

Rng Rng::derive(std::uint64_t index) const {
  return Rng(mix(seed_ ^ (index + 0x9E3779B97F4A7C15ULL)));
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  return mix(state_);
}

double Rng::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_normal() {
  // Box-Muller, cosine branch only; 1-u keeps the log argument in (0,1].
  double u1 = next_double();
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::next_below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
  // Lemire's multiply-shift with rejection to remove bias.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  std::uint64_t lo = static_cast<std::uint64_t>(m);
  if (lo < n) {
    std::uint64_t threshold = (0 - n) % n;
    while (lo < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      lo = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Rng::next_gamma(double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("Rng::next_gamma: alpha must be positive");
  if (alpha < 1.0) {
    // boost via gamma(alpha+1) * U^(1/alpha)
    double g = next_gamma(alpha + 1.0);
    double u = next_double();
    while (u == 0.0) u = next_double();
    return g * std::pow(u, 1.0 / alpha);
  }
  // Marsaglia-Tsang squeeze
  double d = alpha - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = next_normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = next_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

void Rng::next_dirichlet(double concentration, std::span<double> out) {
  if (out.empty()) throw std::invalid_argument("Rng::next_dirichlet: empty output");
  double sum = 0.0;
  for (double& v : out) {
    v = next_gamma(concentration);
    sum += v;
  }
  if (sum <= 0.0) {
    // numerically impossible for positive gammas, but keep a valid row
    for (double& v : out) v = 1.0 / static_cast<double>(out.size());
    return;
  }
  for (double& v : out) v /= sum;
}

}  // namespace salt
