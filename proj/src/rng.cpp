#include "popstrat/rng.hpp"

#include <cmath>

namespace popstrat {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
  // splitmix64 finalizer over the combined state.
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw data_error("uniform_index with n = 0");
  // Lemire's bounded draw with rejection: unbiased.
  while (true) {
    const std::uint64_t x = engine_();
    const __uint128_t m = static_cast<__uint128_t>(x) * n;
    const std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo >= n) return static_cast<std::uint64_t>(m >> 64);
    const std::uint64_t threshold = (0 - n) % n;
    if (lo >= threshold) return static_cast<std::uint64_t>(m >> 64);
  }
}

double Rng::gamma(double shape, double scale) {
  if (!(shape > 0.0) || !(scale > 0.0)) throw data_error("gamma needs positive shape and scale");
  if (shape < 1.0) {
    const double u = uniform_pos();
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_pos();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

long long Rng::binomial(long long n, double p) {
  if (n < 0) throw data_error("binomial needs n >= 0");
  if (!(p >= 0.0 && p <= 1.0)) throw data_error("binomial needs p in [0,1]");
  if (n == 0 || p == 0.0) return 0;
  if (p == 1.0) return n;
  if (p > 0.5) return n - binomial(n, 1.0 - p);

  // CDF inversion with the recurrence P(k+1) = P(k) * (n-k)/(k+1) * p/(1-p).
  const double q = 1.0 - p;
  const double s = p / q;
  double f = std::pow(q, static_cast<double>(n));
  if (f > 0.0) {
    double u = uniform();
    long long k = 0;
    while (u > f && k < n) {
      u -= f;
      f *= s * static_cast<double>(n - k) / static_cast<double>(k + 1);
      ++k;
    }
    return k;
  }
  // q^n underflowed (huge n); fall back to a normal approximation clamped to
  // the support. Only reachable far outside this library's actual use sizes.
  const double mu = static_cast<double>(n) * p;
  const double sd = std::sqrt(mu * q);
  double x = std::round(normal(mu, sd));
  if (x < 0.0) x = 0.0;
  if (x > static_cast<double>(n)) x = static_cast<double>(n);
  return static_cast<long long>(x);
}

std::vector<long long> Rng::multinomial(long long n, const std::vector<double>& probs) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw data_error("multinomial needs nonnegative probabilities");
    total += p;
  }
  if (!(total > 0.0)) throw data_error("multinomial needs positive total probability");
  std::vector<long long> out(probs.size(), 0);
  long long remaining = n;
  double mass = total;
  for (std::size_t i = 0; i + 1 < probs.size() && remaining > 0; ++i) {
    const double cond = (mass > 0.0) ? std::min(1.0, probs[i] / mass) : 1.0;
    const long long draw = binomial(remaining, cond);
    out[i] = draw;
    remaining -= draw;
    mass -= probs[i];
  }
  if (!probs.empty()) out.back() += remaining;
  return out;
}

std::vector<double> Rng::dirichlet(const std::vector<double>& alpha) {
  std::vector<double> out(alpha.size());
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    out[i] = gamma(alpha[i], 1.0);
    total += out[i];
  }
  if (!(total > 0.0)) throw numeric_error("dirichlet draw collapsed to zero mass");
  for (double& v : out) v /= total;
  return out;
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(uniform_index(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

std::vector<int> Rng::sample_without_replacement(int n, int k) {
  if (k > n) throw data_error("sample_without_replacement needs k <= n");
  // Floyd's algorithm; preserves determinism and runs in O(k).
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (int j = n - k; j < n; ++j) {
    const auto t = static_cast<int>(uniform_index(static_cast<std::uint64_t>(j) + 1));
    if (seen[static_cast<std::size_t>(t)]) {
      seen[static_cast<std::size_t>(j)] = true;
      out.push_back(j);
    } else {
      seen[static_cast<std::size_t>(t)] = true;
      out.push_back(t);
    }
  }
  return out;
}

double Rng::normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw data_error("normal_quantile needs p in (0,1)");
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                 6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
               1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
             1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
           (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                 3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
               5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
             4.2313330701600911252e+1) * r + 1.0);
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
              3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
            4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
              6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
            2.05319162663775882187e+0) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
              2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
            5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
              1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
            5.99832206555887937690e-1) * r + 1.0);
  }
  return (q < 0.0) ? -val : val;
}

}  // namespace popstrat
