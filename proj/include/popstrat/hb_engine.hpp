#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/formula.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

namespace popstrat {

// Independent normal priors on coefficients, exponential on the residual sd,
// half-normal on the varying-intercept sd.
struct PriorSpec {
  double intercept_loc = 0.0;
  double intercept_scale = 2.5;
  std::vector<double> coef_scales;  // one per non-intercept design column
  double residual_rate = 1.0;
  double varying_scale = 2.5;

  void validate(std::size_t n_coef) const;
};

// Data-driven default scaling: intercept N(mean(y), 2.5 sd(y)), coefficient k
// N(0, 2.5 sd(y)/sd(x_k)), residual sd Exponential(1/sd(y)), varying sd
// half-normal(2.5 sd(y)). Columns with zero spread fall back to 2.5 sd(y).
PriorSpec autoscale_priors(const Eigen::VectorXd& y, const Eigen::MatrixXd& X);

struct OutcomeModelSpec {
  ModelFormula formula;
  bool cauchy_errors = false;             // scale-mixture Student-t(1) errors
  std::optional<double> fix_residual_sd;  // hold sigma fixed (conjugate tests)
  std::optional<PriorSpec> priors;        // default: autoscaled from data
};

struct McmcConfig {
  int chains = 2;
  int iterations = 2000;  // per chain, including warmup
  int warmup = 1000;
  std::uint64_t seed = 1;
  double proposal_scale = 0.0;  // logistic sampler; 0 = automatic
  int threads = 1;

  void validate() const;
};

// Post-warmup draws, rows grouped by chain (chain c occupies rows
// [c*per_chain, (c+1)*per_chain)).
struct PosteriorDraws {
  std::vector<std::string> names;
  Eigen::MatrixXd draws;
  int n_chains = 0;
  int per_chain = 0;
  int warmup = 0;

  std::size_t index_of(std::string_view name) const;
  Eigen::VectorXd column(std::string_view name) const;
  double mean(std::string_view name) const;
  double sd(std::string_view name) const;
  double quantile_of(std::string_view name, double p) const;
  double median(std::string_view name) const { return quantile_of(name, 0.5); }
};

// Hierarchical linear model:
//   y_i = x_i' beta + theta_{g_i} + eps_i,   eps_i ~ N(0, sigma^2)
// (Cauchy errors via per-unit scale mixture when requested). theta groups are
// optional; group ids must lie in [0, n_groups). Cells whose group has no
// data still get prior-law theta draws so predictions stay defined.
// Sampling is blocked Gibbs; sigma and sigma_theta use slice updates matching
// the exponential / half-normal priors exactly.
// Parameters reported: design columns by name, then theta[g], sigma,
// sigma_theta. A run with zero outcome rows requires explicit priors and
// returns exact prior draws.
PosteriorDraws sample_posterior_linear(const OutcomeModelSpec& spec, const Microdata& data,
                                       const McmcConfig& cfg,
                                       const std::vector<double>* psi_by_unit = nullptr,
                                       const std::vector<int>* group_by_unit = nullptr,
                                       int n_groups = 0, PriorSpec* used_priors = nullptr);

// Bayesian logistic regression of the `included` flag with case weights:
// adaptive random-walk Metropolis started at the IRLS mode, proposal scaled
// toward 30% acceptance during warmup. Throws numeric_error if the
// post-warmup acceptance rate leaves (0.05, 0.95).
PosteriorDraws sample_posterior_logistic(const ModelFormula& formula, const Microdata& stacked,
                                         const McmcConfig& cfg,
                                         std::optional<PriorSpec> priors = std::nullopt);

// Split-chain potential scale reduction per parameter. Chains are split in
// half; degenerate (zero-variance) parameters report exactly 1.
std::vector<double> rhat(const PosteriorDraws& draws);

// Monte Carlo standard error of the posterior mean by per-chain batch means.
double mcse_mean(const PosteriorDraws& draws, std::string_view name);

// Univariate slice sampler (stepping out + shrinkage) on an unbounded
// coordinate. Exposed for tests.
double slice_sample(double x0, const std::function<double(double)>& logdensity, Rng& rng,
                    double width = 1.0, int max_steps = 50);

}  // namespace popstrat
