#include "popstrat/wfpbb.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace popstrat {

namespace {

// Fenwick tree over nonnegative per-unit masses with O(log n) point update
// and inverse-prefix search.
class WeightTree {
 public:
  explicit WeightTree(const std::vector<double>& mass)
      : n_(mass.size()), tree_(mass.size() + 1, 0.0) {
    for (std::size_t i = 0; i < n_; ++i) tree_[i + 1] = mass[i];
    for (std::size_t i = 1; i <= n_; ++i) {
      const std::size_t j = i + (i & (~i + 1));
      if (j <= n_) tree_[j] += tree_[i];
    }
  }

  void add(std::size_t i, double delta) {
    for (std::size_t k = i + 1; k <= n_; k += k & (~k + 1)) tree_[k] += delta;
  }

  double total() const {
    double t = 0.0;
    for (std::size_t k = n_; k > 0; k -= k & (~k + 1)) t += tree_[k];
    return t;
  }

  // Smallest index i with prefix_sum(i) > target.
  std::size_t find(double target) const {
    std::size_t pos = 0;
    std::size_t step = 1;
    while (step * 2 <= n_) step *= 2;
    for (; step > 0; step /= 2) {
      const std::size_t next = pos + step;
      if (next <= n_ && tree_[next] <= target) {
        pos = next;
        target -= tree_[next];
      }
    }
    return pos;  // 0-based unit index
  }

 private:
  std::size_t n_;
  std::vector<double> tree_;
};

}  // namespace

std::vector<BootstrapReplicate> bayesian_bootstrap(std::size_t n, int L, Rng& rng) {
  if (n < 1) throw data_error("bayesian_bootstrap: need at least 1 parent unit");
  if (L < 1) throw data_error("bayesian_bootstrap: need at least 1 replicate");
  std::vector<BootstrapReplicate> out;
  out.reserve(static_cast<std::size_t>(L));
  const std::vector<double> alpha(n, 1.0);
  for (int l = 0; l < L; ++l) {
    BootstrapReplicate rep;
    if (n == 1) {
      rep.counts = {static_cast<long long>(n)};
    } else {
      const auto probs = rng.dirichlet(alpha);
      rep.counts = rng.multinomial(static_cast<long long>(n), probs);
    }
    out.push_back(std::move(rep));
  }
  return out;
}

WeightVector recalibrate_weights(const WeightVector& base, const std::vector<long long>& counts,
                                 double N) {
  if (base.values.size() != counts.size()) {
    throw data_error("recalibrate_weights: counts do not match base weights");
  }
  if (!(N > 0.0)) throw data_error("recalibrate_weights: N must be positive");
  double denom = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 0) throw data_error("recalibrate_weights: negative count");
    if (!(base.values[i] > 0.0)) throw data_error("recalibrate_weights: base weights must be positive");
    denom += base.values[i] * static_cast<double>(counts[i]);
  }
  if (!(denom > 0.0)) throw data_error("recalibrate_weights: all counts are zero");
  WeightVector out;
  out.values.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out.values[i] = N * base.values[i] * static_cast<double>(counts[i]) / denom;
  }
  return out;
}

SyntheticPopulation polya_urn_expand(const std::vector<double>& weights,
                                     const std::vector<long long>& counts, long long N, Rng& rng) {
  if (weights.size() != counts.size()) {
    throw data_error("polya_urn_expand: weights and counts differ in length");
  }
  long long n = 0;
  for (long long c : counts) {
    if (c < 0) throw data_error("polya_urn_expand: negative count");
    n += c;
  }
  if (n < 1) throw data_error("polya_urn_expand: empty parent multiset");
  if (N <= n) throw data_error("polya_urn_expand: N must exceed the parent sample size");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw data_error("polya_urn_expand: negative weight");
    wsum += w;
  }
  if (std::abs(wsum - static_cast<double>(N)) > 1e-6 * static_cast<double>(N)) {
    throw data_error("polya_urn_expand: weights must sum to N (recalibrated)");
  }

  SyntheticPopulation pop;
  pop.population_size = N;
  pop.unit_counts.assign(counts.begin(), counts.end());

  const double step = static_cast<double>(N - n) / static_cast<double>(n);
  // Initial per-unit mass: max(0, w_i - 1) for units in the urn; units with
  // w_i < 1 (possible after recalibration) are clamped out and counted.
  std::vector<double> mass(weights.size(), 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (counts[i] == 0) continue;  // not in this bootstrap replicate's urn
    const double m = weights[i] - 1.0;
    if (m < 0.0) {
      ++pop.clamped_units;
    } else {
      mass[i] = m;
    }
  }
  WeightTree tree(mass);
  double running_total = tree.total();
  if (!(running_total > 0.0)) {
    throw numeric_error("polya_urn_expand: no positive selection mass (all weights < 1)");
  }

  const long long draws = N - n;
  const long long check_every = 1024;
  for (long long k = 0; k < draws; ++k) {
    if (k % check_every == 0) {
      // Guard against accumulation drift in the incremental totals.
      const double exact = tree.total();
      const double err = std::abs(running_total - exact) / std::max(1.0, exact);
      pop.max_prob_sum_error = std::max(pop.max_prob_sum_error, err);
      running_total = exact;
    }
    const double u = rng.uniform() * running_total;
    std::size_t pick = tree.find(u);
    if (pick >= mass.size() || mass[pick] <= 0.0) {
      // Accumulation-drift edge: the search landed past the mass support.
      pick = std::min(pick, mass.size() - 1);
      while (pick > 0 && mass[pick] <= 0.0) --pick;
      if (mass[pick] <= 0.0) throw numeric_error("polya_urn_expand: selection mass exhausted");
    }
    ++pop.unit_counts[pick];
    mass[pick] += step;
    tree.add(pick, step);
    running_total += step;
  }
  return pop;
}

CellTable synthetic_cell_table(const SyntheticPopulation& pop, const Microdata& parents) {
  if (pop.unit_counts.size() != parents.size()) {
    throw data_error("synthetic_cell_table: population does not match parent sample");
  }
  std::map<CellKey, double> counts;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (pop.unit_counts[i] == 0) continue;
    counts[parents.key_of(i)] += static_cast<double>(pop.unit_counts[i]);
  }
  CellTable table;
  table.schema = parents.schema();
  table.role = CellRole::population;
  for (const auto& [key, count] : counts) {
    CellRow row;
    row.key = key;
    row.count = count;
    table.rows.push_back(std::move(row));
  }
  table.validate();
  return table;
}

std::vector<CellTable> estimate_pop_cells(const Microdata& parents, long long N, int L, Rng& rng,
                                          std::vector<SyntheticPopulation>* populations) {
  parents.validate();
  if (parents.size() < 2) throw data_error("estimate_pop_cells: need at least 2 parent units");
  if (N <= static_cast<long long>(parents.size())) {
    throw data_error("estimate_pop_cells: N must exceed the parent sample size");
  }
  WeightVector base;
  base.values.reserve(parents.size());
  for (std::size_t i = 0; i < parents.size(); ++i) base.values.push_back(parents.weight(i));

  const auto replicates = bayesian_bootstrap(parents.size(), L, rng);
  std::vector<CellTable> tables;
  tables.reserve(replicates.size());
  for (const auto& rep : replicates) {
    const auto recal = recalibrate_weights(base, rep.counts, static_cast<double>(N));
    auto pop = polya_urn_expand(recal.values, rep.counts, N, rng);
    tables.push_back(synthetic_cell_table(pop, parents));
    if (populations) populations->push_back(std::move(pop));
  }
  return tables;
}

}  // namespace popstrat
