#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace popstrat {

// Error taxonomy. data_error covers malformed input, schema mismatches and
// violated preconditions on user-supplied data (CLI exit code 2).
// numeric_error covers convergence failures and numerical breakdown
// (CLI exit code 3).
class data_error : public std::runtime_error {
 public:
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Two-sided 97.5% standard normal quantile, used for all Wald intervals.
inline constexpr double kZ975 = 1.959963984540054;

inline bool finite(double x) { return std::isfinite(x); }

// Type-7 (linear interpolation) quantile of an unsorted sample.
// Matches the convention used throughout the tests.
inline double quantile(std::vector<double> x, double p) {
  if (x.empty()) throw data_error("quantile of empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw data_error("quantile level outside [0,1]");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= x.size()) return x.back();
  const double frac = h - static_cast<double>(lo);
  return x[lo] + frac * (x[lo + 1] - x[lo]);
}

inline double mean_of(const std::vector<double>& x) {
  if (x.empty()) throw data_error("mean of empty sample");
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

// Unbiased sample variance (n-1 denominator); 0 for n < 2.
inline double variance_of(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double sd_of(const std::vector<double>& x) { return std::sqrt(variance_of(x)); }

}  // namespace popstrat
