#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/estimates.hpp"
#include "popstrat/formula.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

namespace popstrat {

// Case weights attached to the units of one Microdata, with trimming
// bookkeeping. GREG calibration can produce negative weights; everything
// downstream uses Hajek ratios, which tolerate them.
struct WeightVector {
  std::vector<double> values;
  int trimmed = 0;        // units capped by winsorization
  double trim_cap = 0.0;  // cap applied (0 when no trimming)

  double sum() const;
};

// Weighted logistic regression fit of an inclusion indicator.
struct PropensityFit {
  std::vector<std::string> names;     // all design columns
  Eigen::VectorXd coef;               // aligned to names; 0 for dropped columns
  std::vector<std::string> dropped;   // aliased columns removed before fitting
  std::vector<double> fitted;         // per input unit, in (0,1)
  int iterations = 0;
  double max_abs_score = 0.0;
  bool converged = false;
};

// Sample mean within each reporting group, cells weighted by their sample
// counts. SE treats units as iid within cells.
std::vector<EstimateSummary> unweighted_mean(const CellTable& sample, const Grouping& grouping);

// Poststratified mean: cell means weighted by population counts. Population
// cells with no sample data are dropped and the weights renormalized over the
// covered mass; `uncovered` (when given) receives the dropped population
// share per group. SE includes the finite-population correction.
std::vector<EstimateSummary> poststratified_mean(const CellTable& sample,
                                                 const CellTable& population,
                                                 const Grouping& grouping,
                                                 std::vector<double>* uncovered = nullptr);

// Weighted logistic regression of `included` on the formula terms by IRLS,
// using unit weights as case weights. Aliased columns are dropped up front.
// Throws numeric_error on separation or non-convergence.
PropensityFit fit_inclusion_model(const Microdata& stacked, const ModelFormula& formula,
                                  int max_iterations = 100);

// Hajek means of the outcome under caller-supplied weights, one per group.
// Reported se is 0: variance for the weighting estimators comes from
// jackknife_se over the full pipeline. Throws on an empty group.
std::vector<EstimateSummary> weighted_mean(const Microdata& data, const WeightVector& weights,
                                           const Grouping& grouping, std::string_view method);

// Hajek means of the included units with weights 1 / fitted propensity,
// optionally winsorized at the given upper quantile of the weights.
std::vector<EstimateSummary> ipw_mean(const Microdata& nonprob,
                                      const std::vector<double>& propensities,
                                      const Grouping& grouping,
                                      std::optional<double> trim_quantile,
                                      WeightVector* weights_out = nullptr);

// One raking margin: a schema variable and its target totals by level.
struct RakingMargin {
  std::string variable;
  std::vector<double> targets;
};

// Iterative proportional fitting of unit weights to the margin totals.
// Converges when every margin matches within tol (absolute, per level,
// relative to the margin total); throws numeric_error otherwise.
WeightVector rake_weights(const Microdata& data, const WeightVector& base,
                          const std::vector<RakingMargin>& margins, double tol = 1e-8,
                          int max_iterations = 500);

// GREG calibration weights w_i g_i with
//   g_i = 1 + (t_x - Sum w x)' (Sum w x x')^{-1} x_i,
// so that calibrated totals reproduce t_x for every design column. The
// Hajek mean under these weights equals the projection-form GREG estimator.
WeightVector greg_weights(const Microdata& sample, const Design& design,
                          const Eigen::VectorXd& population_totals, const WeightVector& base);

// Generalized regression estimator: linear working model on the design
// columns, calibrated to population totals t_x (aligned to the design,
// intercept first; t_x[0] = N). Group estimates are Hajek means under the
// calibration weights.
std::vector<EstimateSummary> greg_mean(const Microdata& sample, const Design& design,
                                       const Eigen::VectorXd& population_totals,
                                       const WeightVector& base, const Grouping& grouping);

// Doubly robust means: per group, population average of outcome-model
// predictions over the group's cells plus the Hajek-weighted mean of sample
// residuals within the group.
std::vector<EstimateSummary> dr_mean(const Microdata& nonprob, const Design& design,
                                     const CellTable& population,
                                     const std::vector<double>& propensities,
                                     std::optional<double> trim_quantile,
                                     const Grouping& grouping);

// Population design totals Sum_j N_j x_j for a cell table.
Eigen::VectorXd design_totals(const Design& design, const CellTable& population);

// Delete-a-group jackknife over a vector-valued estimator. Units are
// partitioned into n_groups near-equal random groups (seeded); `estimate` is
// re-run on the kept unit indices and must return one value per reported
// component. Replicates that throw are flagged and excluded; a component is
// also skipped in replicates where it comes back non-finite.
struct JackknifeResult {
  std::vector<double> se;
  std::vector<int> failed_replicates;  // replicate ids that threw
};

JackknifeResult jackknife_se(std::size_t n_units, int n_groups, std::uint64_t seed,
                             const std::function<std::vector<double>(const std::vector<int>&)>& estimate);

// Scalar convenience wrapper.
double jackknife_se_scalar(std::size_t n_units, int n_groups, std::uint64_t seed,
                           const std::function<double(const std::vector<int>&)>& estimate);

// Weighted least squares on a design matrix, ridge-stabilized. Shared by
// GREG and the DR outcome model.
Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& w);

}  // namespace popstrat
