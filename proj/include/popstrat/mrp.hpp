#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/estimates.hpp"
#include "popstrat/hb_engine.hpp"
#include "popstrat/microdata.hpp"

namespace popstrat {

// The four estimator variants. The tag pins the cell source, count source,
// and psi usage:
//   S:   sample-observed cells,    known N_j,     no psi
//   P:   all population cells,     known N_j,     no psi
//   R:   reference-observed cells, estimated N_j (WFPBB draws), no psi
//   INT: all population cells,     known N_j,     psi + (1|psi) in the model
enum class MrpVariant { S, P, R, INT };

MrpVariant parse_variant(std::string_view text);
std::string_view to_string(MrpVariant variant);

// Per-cell estimated inclusion probabilities and their rounding groups.
struct PsiPredictor {
  std::vector<CellKey> cells;
  std::vector<double> psi;     // in (0,1), aligned with cells
  std::vector<int> group;      // rounded-psi group id, aligned with cells
  int n_groups = 0;
  int digits = 1;

  std::optional<std::size_t> find(const CovariateSchema& schema, const CellKey& key) const;
};

// Group cells by psi rounded to `digits` decimal places; group ids follow
// ascending rounded value.
PsiPredictor build_psi_predictors(const std::vector<CellKey>& cells,
                                  const std::vector<double>& psi_by_cell, int digits);

// Posterior-median psi per cell from logistic draws, then grouping as above.
PsiPredictor build_psi_predictors(const PosteriorDraws& inclusion_fit,
                                  const ModelFormula& inclusion_formula,
                                  const CellTable& cells, int digits);

// Closed-form shrinkage estimator: per sample cell,
// theta_j = (ybar_j + delta_j ybar_s) / (1 + delta_j), delta_j =
// sigma_j^2 / (n_j sigma_theta^2); group estimate Sum (N_j/N) theta_j over
// the group's cells (weights renormalized within the group). Cells lacking a
// variance use the pooled within-cell variance.
std::vector<EstimateSummary> shrinkage_estimate(const CellTable& sample,
                                                const CellTable& population, double sigma_theta,
                                                const Grouping& grouping);

// Per-draw poststratification: cell_draws is T x J, weights is either 1 x J
// (fixed counts) or T x J (per-draw counts). Returns one draw vector per
// group. Throws on an all-zero group weight in any used row.
std::vector<std::vector<double>> poststratify_draws(const Eigen::MatrixXd& cell_draws,
                                                    const Eigen::MatrixXd& weights,
                                                    const std::vector<CellKey>& cells,
                                                    const Grouping& grouping);

struct MrpOptions {
  int wfpbb_populations = 100;  // L
  int psi_digits = 1;
};

struct MrpResult {
  std::vector<EstimateSummary> estimates;
  double max_rhat = 1.0;
  double max_coef_prior_ratio = 0.0;  // max |posterior mean| / prior scale
  double uncovered_mass = 0.0;        // population share outside the cell set
  long long wfpbb_clamped = 0;
  std::vector<std::string> notes;
};

// Full MRP run: fit the outcome model on the sample (and the inclusion model
// on sample+reference for INT), predict every cell in the variant's cell
// set per posterior draw, and poststratify. Point estimate = posterior mean,
// SE = posterior sd, CI = central 95% posterior interval.
MrpResult mrp_estimate(MrpVariant variant, const Microdata& sample, const CellTable& population,
                       const Microdata* reference, const OutcomeModelSpec& spec,
                       const McmcConfig& cfg, const Grouping& grouping,
                       const MrpOptions& options = {});

}  // namespace popstrat
