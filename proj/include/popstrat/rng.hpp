#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "popstrat/common.hpp"

namespace popstrat {

// Deterministic random number source.
//
// All stochastic code in the library draws through this wrapper instead of
// the <random> distribution classes, whose outputs are implementation
// defined. Every transform here is pinned, so a fixed seed yields identical
// streams on any conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1). 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1), never exactly 0 or 1 (safe for logs and quantiles).
  double uniform_pos() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer uniform on [0, n). Rejection-free bounded draw via 64-bit
  // multiply-shift with rejection of the biased tail.
  std::uint64_t uniform_index(std::uint64_t n);

  // Standard normal via Wichura's PPND16 inverse CDF applied to an open
  // uniform: strictly monotone in the underlying uniform, fully portable.
  double normal() { return normal_quantile(uniform_pos()); }
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  double exponential(double rate) { return -std::log(uniform_pos()) / rate; }

  // Marsaglia-Tsang for shape >= 1; boost to shape+1 with a power of a
  // uniform for shape < 1.
  double gamma(double shape, double scale);

  double beta(double a, double b) {
    const double x = gamma(a, 1.0);
    const double y = gamma(b, 1.0);
    return x / (x + y);
  }

  double chi_squared(double df) { return gamma(0.5 * df, 2.0); }

  // Binomial by CDF inversion; switches to the complement when p > 1/2 so the
  // expected scan length stays O(n * min(p, 1-p)).
  long long binomial(long long n, double p);

  // Multinomial via sequential conditional binomials.
  std::vector<long long> multinomial(long long n, const std::vector<double>& probs);

  // Dirichlet via normalized gammas. alpha must be positive.
  std::vector<double> dirichlet(const std::vector<double>& alpha);

  // Fisher-Yates shuffle of indices 0..n-1.
  std::vector<int> permutation(int n);

  // Sample k distinct indices from 0..n-1 (order of first selection).
  std::vector<int> sample_without_replacement(int n, int k);

  std::mt19937_64& engine() { return engine_; }

  // Wichura PPND16: inverse standard normal CDF, |relative error| < 1e-15
  // over (0, 1).
  static double normal_quantile(double p);

 private:
  std::mt19937_64 engine_;
};

// Stream derivation: mixes a master seed with a tag via splitmix64 so that
// per-replication / per-chain substreams are independent of iteration order
// and thread scheduling.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag);

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag_a,
                                 std::uint64_t tag_b) {
  return derive_seed(derive_seed(master, tag_a), tag_b);
}

}  // namespace popstrat
