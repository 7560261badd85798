#pragma once

#include <cstdint>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/design_estimators.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

namespace popstrat {

// One Bayesian-bootstrap replicate of the parent sample.
struct BootstrapReplicate {
  std::vector<long long> counts;  // r_i per parent unit, sum = n
};

// A synthetic population of exactly N units, stored as per-parent-unit
// multiplicities, plus expansion diagnostics.
struct SyntheticPopulation {
  std::vector<long long> unit_counts;  // per parent unit, sum = N
  long long population_size = 0;
  long long clamped_units = 0;       // units excluded for recalibrated weight < 1
  double max_prob_sum_error = 0.0;   // worst relative drift of the draw normalizer
};

// L replicates of Bayesian-bootstrap counts over n parent units: counts are
// Multinomial(n, p) with p ~ Dirichlet(1, ..., 1).
std::vector<BootstrapReplicate> bayesian_bootstrap(std::size_t n, int L, Rng& rng);

// w_i^l = N * w_i r_i / Sum_j w_j r_j; zero-count units get weight 0.
WeightVector recalibrate_weights(const WeightVector& base, const std::vector<long long>& counts,
                                 double N);

// Polya-urn expansion: starting from the bootstrap multiset (counts r_i,
// Sum = n), draw N - n further units; draw k picks unit i with probability
// proportional to max(0, w_i - 1 + l_i (N-n)/n) where l_i counts prior Polya
// selections of unit i. Units whose recalibrated weight is below 1 are
// clamped to probability 0 and reported via clamped_units.
SyntheticPopulation polya_urn_expand(const std::vector<double>& weights,
                                     const std::vector<long long>& counts, long long N, Rng& rng);

// Cell-count table of one synthetic population over the parent covariates.
CellTable synthetic_cell_table(const SyntheticPopulation& pop, const Microdata& parents);

// Full WFPBB pipeline: L bootstrap replicates of the weighted parent sample,
// each expanded to a synthetic population of size N and tabulated.
std::vector<CellTable> estimate_pop_cells(const Microdata& parents, long long N, int L, Rng& rng,
                                          std::vector<SyntheticPopulation>* populations = nullptr);

}  // namespace popstrat
