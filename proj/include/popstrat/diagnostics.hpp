#pragma once

#include <optional>
#include <string>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/csv.hpp"

namespace popstrat {

// Complete description of a cell-structured population with a two-class
// response mechanism: cell size N_j, response propensity psi_j, respondent
// and nonrespondent outcome means, and a within-cell sd.
struct PopulationSpecCell {
  CellKey key;        // empty when the spec has no covariate schema
  std::string label;  // display label ("cell 3" or covariate levels)
  double N = 0.0;
  double psi = 0.0;
  double mean_respondents = 0.0;
  double mean_nonrespondents = 0.0;
  double sd = 0.0;
};

struct PopulationSpec {
  std::optional<CovariateSchema> schema;
  std::vector<PopulationSpecCell> cells;

  double total() const;    // Sum N_j
  double psi_bar() const;  // Sum (N_j/N) psi_j
  // True population mean: Sum (N_j/N)(psi_j YbarR_j + (1-psi_j) YbarM_j).
  double population_mean() const;
  // Expected respondent mean, Sum N_j psi_j YbarR_j / (N psi_bar).
  double respondent_mean() const;

  void validate() const;
};

// Reads `cell vars..., N, psi, meanR, meanM, sd`; leading non-reserved
// columns become covariates with inferred levels.
PopulationSpec read_population_spec_csv(const CsvTable& table);
PopulationSpec read_population_spec_file(const std::string& path);

// Exact selection-bias decomposition for the unweighted mean, the
// poststratified mean, and the shrinkage (partial-pooling) estimator, plus
// the stochastic-model approximations (labeled approx_*): the latter treat
// the response propensity as a unit-level random variable and are reported
// as a secondary, approximate path.
struct BiasRecord {
  double A = 0.0;  // propensity-variation term
  double B = 0.0;  // respondent/nonrespondent contrast term
  double bias_unw = 0.0;  // A + B
  double bias_ps = 0.0;   // B
  double bias_mrp = 0.0;
  double approx_bias_unw = 0.0;  // Cov(psi, y) / psi_bar over cells
  double approx_bias_ps = 0.0;   // Sum (N_j/N) Cov_j(response, y) / psi_j
};

// delta_j = sd_j^2 / (n_j sigma_theta^2) with expected cell sample sizes
// n_j = n_total N_j psi_j / Sum_k N_k psi_k.
BiasRecord analytic_bias(const PopulationSpec& spec, double sigma_theta, double n_total);
// Same with caller-supplied expected n_j (aligned with spec.cells).
BiasRecord analytic_bias(const PopulationSpec& spec, double sigma_theta,
                         const std::vector<double>& expected_nj);

// Conditional (given cell sample sizes) variances of the three estimators.
// sample supplies n_j and s_j^2, population supplies N_j; delta is aligned
// with the sample rows. var_ps carries the finite-population factor.
struct VarianceRecord {
  double var_unw = 0.0;
  double var_ps = 0.0;
  double var_mrp = 0.0;
};

VarianceRecord conditional_variances(const CellTable& sample, const CellTable& population,
                                     const std::vector<double>& delta);

// Variances evaluated at the expected allocation of a PopulationSpec:
// n_j = n_total N_j psi_j / Sum_k N_k psi_k, s_j = spec sd, and
// delta_j = sd_j^2 / (n_j sigma_theta^2).
VarianceRecord expected_variances(const PopulationSpec& spec, double sigma_theta, double n_total);

}  // namespace popstrat
