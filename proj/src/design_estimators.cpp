#include "popstrat/design_estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace popstrat {

namespace {

double invlogit(double eta) {
  if (eta > 30.0) eta = 30.0;
  if (eta < -30.0) eta = -30.0;
  return 1.0 / (1.0 + std::exp(-eta));
}

// Columns that are exactly linear combinations of earlier ones, detected by
// column-pivoted QR on the weight-scaled design.
std::vector<std::size_t> independent_columns(const Eigen::MatrixXd& X, const Eigen::VectorXd& w) {
  Eigen::MatrixXd S = w.array().sqrt().matrix().asDiagonal() * X;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(S);
  qr.setThreshold(1e-10);
  const auto rank = static_cast<std::size_t>(qr.rank());
  const auto& perm = qr.colsPermutation().indices();
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < rank; ++k) keep.push_back(static_cast<std::size_t>(perm[static_cast<Eigen::Index>(k)]));
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace

double WeightVector::sum() const {
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

std::vector<EstimateSummary> unweighted_mean(const CellTable& sample, const Grouping& grouping) {
  sample.validate();
  std::vector<EstimateSummary> out;
  for (const auto& group : grouping.groups) {
    double n = 0.0;
    double sum = 0.0;
    double var_num = 0.0;  // Sum n_j s_j^2
    for (const auto& row : sample.rows) {
      if (!Grouping::contains(group, row.key)) continue;
      if (row.count <= 0.0) continue;
      if (!row.mean) throw data_error("unweighted_mean: cell without outcome mean");
      n += row.count;
      sum += row.count * *row.mean;
      if (row.variance) var_num += row.count * *row.variance;
    }
    if (n <= 0.0) {
      out.push_back(wald_summary(group.label, "UnW", std::nan(""), std::nan("")));
      continue;
    }
    const double est = sum / n;
    const double se = std::sqrt(var_num) / n;
    out.push_back(wald_summary(group.label, "UnW", est, se));
  }
  return out;
}

std::vector<EstimateSummary> poststratified_mean(const CellTable& sample,
                                                 const CellTable& population,
                                                 const Grouping& grouping,
                                                 std::vector<double>* uncovered) {
  sample.validate();
  population.validate();
  if (!(sample.schema == population.schema)) {
    throw data_error("poststratified_mean: sample and population schemas differ");
  }
  if (uncovered) uncovered->assign(grouping.groups.size(), 0.0);
  std::vector<EstimateSummary> out;
  for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
    const auto& group = grouping.groups[g];
    double covered_n = 0.0;  // population mass with sample data
    double total_n = 0.0;    // all population mass in the group
    double sum = 0.0;
    double var_sum = 0.0;
    for (const auto& prow : population.rows) {
      if (!Grouping::contains(group, prow.key)) continue;
      if (prow.count <= 0.0) continue;
      total_n += prow.count;
      const CellRow* srow = sample.find(prow.key);
      if (!srow || srow->count <= 0.0 || !srow->mean) continue;
      covered_n += prow.count;
      sum += prow.count * *srow->mean;
      if (srow->variance) {
        const double fpc = std::max(0.0, 1.0 - srow->count / prow.count);
        var_sum += prow.count * prow.count * fpc * *srow->variance / srow->count;
      }
    }
    if (uncovered && total_n > 0.0) (*uncovered)[g] = (total_n - covered_n) / total_n;
    if (covered_n <= 0.0) {
      out.push_back(wald_summary(group.label, "PS", std::nan(""), std::nan("")));
      continue;
    }
    const double est = sum / covered_n;
    const double se = std::sqrt(var_sum) / covered_n;
    out.push_back(wald_summary(group.label, "PS", est, se));
  }
  return out;
}

PropensityFit fit_inclusion_model(const Microdata& stacked, const ModelFormula& formula,
                                  int max_iterations) {
  stacked.validate();
  if (!stacked.has_included_column()) {
    throw data_error("fit_inclusion_model: data has no included flag");
  }
  if (formula.psi_fixed || formula.psi_varying) {
    throw data_error("fit_inclusion_model: inclusion model cannot reference psi");
  }
  const Design design(stacked.schema(), formula);
  const Eigen::MatrixXd X = design.matrix_for_units(stacked);
  const auto n = static_cast<Eigen::Index>(stacked.size());
  Eigen::VectorXd y(n);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = stacked.included(static_cast<std::size_t>(i));
    b[i] = stacked.weight(static_cast<std::size_t>(i));
  }
  if (b.sum() <= 0.0) throw data_error("fit_inclusion_model: all case weights are zero");

  const auto keep = independent_columns(X, b);
  PropensityFit fit;
  fit.names = design.column_names();
  for (std::size_t c = 0; c < design.n_columns(); ++c) {
    if (std::find(keep.begin(), keep.end(), c) == keep.end()) fit.dropped.push_back(fit.names[c]);
  }
  Eigen::MatrixXd Xk(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) Xk.col(static_cast<Eigen::Index>(k)) = X.col(static_cast<Eigen::Index>(keep[k]));

  const auto p = Xk.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  const double ridge = 1e-8;
  double loglik_prev = -std::numeric_limits<double>::infinity();
  bool converged = false;
  int iter = 0;
  Eigen::VectorXd mu(n);
  for (; iter < max_iterations; ++iter) {
    const Eigen::VectorXd eta = Xk * beta;
    double loglik = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = invlogit(eta[i]);
      // Bernoulli log likelihood with case weights, numerically clamped.
      const double p1 = std::min(1.0 - 1e-15, std::max(1e-15, mu[i]));
      loglik += b[i] * (y[i] * std::log(p1) + (1.0 - y[i]) * std::log(1.0 - p1));
    }
    const Eigen::VectorXd score = Xk.transpose() * (b.array() * (y - mu).array()).matrix();
    fit.max_abs_score = score.cwiseAbs().maxCoeff();
    const double rel_change = std::abs(loglik - loglik_prev) / (std::abs(loglik) + 1.0);
    if (fit.max_abs_score < 1e-8 || (iter > 0 && rel_change < 1e-10)) {
      converged = true;
      break;
    }
    loglik_prev = loglik;
    const Eigen::VectorXd wirls = (b.array() * mu.array() * (1.0 - mu.array())).matrix();
    Eigen::MatrixXd H = Xk.transpose() * wirls.asDiagonal() * Xk;
    H.diagonal().array() += ridge;
    beta += H.ldlt().solve(score);
  }
  if (!converged) {
    if (beta.cwiseAbs().maxCoeff() > 15.0) {
      throw numeric_error(
          "fit_inclusion_model: coefficients diverging (complete or quasi-complete separation)");
    }
    throw numeric_error("fit_inclusion_model: IRLS did not converge in " +
                        std::to_string(max_iterations) + " iterations");
  }
  fit.converged = true;
  fit.iterations = iter;
  fit.coef = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.n_columns()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    fit.coef[static_cast<Eigen::Index>(keep[k])] = beta[static_cast<Eigen::Index>(k)];
  }
  fit.fitted.resize(stacked.size());
  const Eigen::VectorXd eta = Xk * beta;
  for (Eigen::Index i = 0; i < n; ++i) {
    // Clamp away from exact 0/1 so downstream inverse weights stay finite.
    fit.fitted[static_cast<std::size_t>(i)] = std::min(1.0 - 1e-12, std::max(1e-12, invlogit(eta[i])));
  }
  return fit;
}

namespace {

// Winsorize weights at their q-quantile (cap, do not drop).
void apply_trim(WeightVector& w, std::optional<double> trim_quantile) {
  if (!trim_quantile) return;
  if (!(*trim_quantile > 0.0 && *trim_quantile <= 1.0)) {
    throw data_error("trim quantile must be in (0, 1]");
  }
  if (w.values.empty() || *trim_quantile == 1.0) return;
  const double cap = quantile(w.values, *trim_quantile);
  w.trim_cap = cap;
  for (double& v : w.values) {
    if (v > cap) {
      v = cap;
      ++w.trimmed;
    }
  }
}

}  // namespace

std::vector<EstimateSummary> weighted_mean(const Microdata& data, const WeightVector& weights,
                                           const Grouping& grouping, std::string_view method) {
  if (weights.values.size() != data.size()) {
    throw data_error(std::string(method) + ": weight length does not match units");
  }
  std::vector<EstimateSummary> out;
  for (const auto& group : grouping.groups) {
    double num = 0.0;
    double den = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!Grouping::contains(group, data.key_of(i))) continue;
      if (!data.outcome_observed(i)) throw data_error(std::string(method) + ": unit without outcome");
      any = true;
      num += weights.values[i] * data.outcome(i);
      den += weights.values[i];
    }
    if (!any) throw data_error(std::string(method) + ": group '" + group.label + "' has no units");
    if (den == 0.0) throw data_error(std::string(method) + ": group '" + group.label + "' has zero total weight");
    out.push_back(wald_summary(group.label, std::string(method), num / den, 0.0));
  }
  return out;
}

std::vector<EstimateSummary> ipw_mean(const Microdata& nonprob,
                                      const std::vector<double>& propensities,
                                      const Grouping& grouping,
                                      std::optional<double> trim_quantile,
                                      WeightVector* weights_out) {
  if (propensities.size() != nonprob.size()) {
    throw data_error("ipw_mean: propensity count does not match units");
  }
  WeightVector w;
  w.values.reserve(propensities.size());
  for (double p : propensities) {
    if (!(p > 0.0 && p <= 1.0)) throw data_error("ipw_mean: propensities must lie in (0, 1]");
    w.values.push_back(1.0 / p);
  }
  apply_trim(w, trim_quantile);
  auto est = weighted_mean(nonprob, w, grouping, "IPW");
  if (weights_out) *weights_out = std::move(w);
  return est;
}

WeightVector rake_weights(const Microdata& data, const WeightVector& base,
                          const std::vector<RakingMargin>& margins, double tol,
                          int max_iterations) {
  data.validate();
  if (base.values.size() != data.size()) throw data_error("rake_weights: base weight length mismatch");
  if (margins.empty()) throw data_error("rake_weights: no margins given");

  struct BoundMargin {
    std::size_t var;
    std::vector<double> targets;
  };
  std::vector<BoundMargin> bound;
  for (const auto& m : margins) {
    BoundMargin bm;
    bm.var = data.schema().require_var(m.variable);
    const auto n_levels = data.schema().variables[bm.var].levels.size();
    if (m.targets.size() != n_levels) {
      throw data_error("rake_weights: margin '" + m.variable + "' needs " +
                       std::to_string(n_levels) + " targets");
    }
    for (double t : m.targets) {
      if (!(t >= 0.0) || !std::isfinite(t)) throw data_error("rake_weights: invalid margin target");
    }
    bm.targets = m.targets;
    bound.push_back(std::move(bm));
  }

  WeightVector w = base;
  w.trimmed = 0;
  w.trim_cap = 0.0;
  // Margin levels with a positive target but zero sample weight can never be
  // matched: report them rather than looping to max_iterations.
  for (const auto& bm : bound) {
    std::vector<double> have(bm.targets.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      have[static_cast<std::size_t>(data.level(bm.var, i))] += w.values[i];
    }
    for (std::size_t l = 0; l < bm.targets.size(); ++l) {
      if (bm.targets[l] > 0.0 && have[l] <= 0.0) {
        throw data_error("rake_weights: margin '" + data.schema().variables[bm.var].name +
                         "' level '" + data.schema().variables[bm.var].levels[l] +
                         "' has positive target but no sample weight");
      }
    }
  }

  for (int iter = 0; iter < max_iterations; ++iter) {
    for (const auto& bm : bound) {
      std::vector<double> have(bm.targets.size(), 0.0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        have[static_cast<std::size_t>(data.level(bm.var, i))] += w.values[i];
      }
      std::vector<double> factor(bm.targets.size(), 1.0);
      for (std::size_t l = 0; l < bm.targets.size(); ++l) {
        if (have[l] > 0.0) factor[l] = bm.targets[l] / have[l];
      }
      for (std::size_t i = 0; i < data.size(); ++i) {
        w.values[i] *= factor[static_cast<std::size_t>(data.level(bm.var, i))];
      }
    }
    // Convergence check against every margin simultaneously.
    double worst = 0.0;
    for (const auto& bm : bound) {
      std::vector<double> have(bm.targets.size(), 0.0);
      double total = 0.0;
      for (double t : bm.targets) total += t;
      for (std::size_t i = 0; i < data.size(); ++i) {
        have[static_cast<std::size_t>(data.level(bm.var, i))] += w.values[i];
      }
      for (std::size_t l = 0; l < bm.targets.size(); ++l) {
        const double scale = (total > 0.0) ? total : 1.0;
        worst = std::max(worst, std::abs(have[l] - bm.targets[l]) / scale);
      }
    }
    if (worst < tol) return w;
  }
  throw numeric_error("rake_weights: IPF did not converge in " + std::to_string(max_iterations) +
                      " iterations (margins may be inconsistent with the sample)");
}

Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& w) {
  Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  A.diagonal().array() += 1e-8;
  return A.ldlt().solve(X.transpose() * (w.array() * y.array()).matrix());
}

Eigen::VectorXd design_totals(const Design& design, const CellTable& population) {
  if (!(design.schema() == population.schema)) throw data_error("design_totals: schema mismatch");
  if (design.has_psi_column()) throw data_error("design_totals: psi designs have no fixed totals");
  Eigen::VectorXd t = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.n_columns()));
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(design.n_columns()));
  for (const auto& cell : population.rows) {
    design.fill_row(cell.key, std::nullopt, row);
    t += cell.count * row.transpose();
  }
  return t;
}

WeightVector greg_weights(const Microdata& sample, const Design& design,
                          const Eigen::VectorXd& population_totals, const WeightVector& base) {
  sample.validate();
  if (base.values.size() != sample.size()) throw data_error("greg_weights: weight length mismatch");
  if (population_totals.size() != static_cast<Eigen::Index>(design.n_columns())) {
    throw data_error("greg_weights: totals length does not match design");
  }
  const Eigen::MatrixXd X = design.matrix_for_units(sample);
  const auto n = static_cast<Eigen::Index>(sample.size());
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = base.values[static_cast<std::size_t>(i)];

  // g_i = 1 + (t - X'w)' A^{-1} x_i with A = X' W X. Calibration requires a
  // full-rank design; an exact solve keeps the calibrated totals exact.
  const auto keep = independent_columns(X, w);
  if (keep.size() < design.n_columns()) {
    std::string names;
    for (std::size_t c = 0; c < design.n_columns(); ++c) {
      if (std::find(keep.begin(), keep.end(), c) == keep.end()) {
        if (!names.empty()) names += ", ";
        names += design.column_names()[c];
      }
    }
    throw data_error("greg_weights: design is rank-deficient on the sample (aliased: " + names + ")");
  }
  const Eigen::MatrixXd A = X.transpose() * w.asDiagonal() * X;
  const Eigen::VectorXd d = population_totals - X.transpose() * w;
  const Eigen::VectorXd lambda = A.ldlt().solve(d);
  WeightVector out;
  out.values.resize(sample.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values[static_cast<std::size_t>(i)] = w[i] * (1.0 + X.row(i).dot(lambda));
  }
  return out;
}

std::vector<EstimateSummary> greg_mean(const Microdata& sample, const Design& design,
                                       const Eigen::VectorXd& population_totals,
                                       const WeightVector& base, const Grouping& grouping) {
  const WeightVector cal = greg_weights(sample, design, population_totals, base);
  return weighted_mean(sample, cal, grouping, "GREG");
}

std::vector<EstimateSummary> dr_mean(const Microdata& nonprob, const Design& design,
                                     const CellTable& population,
                                     const std::vector<double>& propensities,
                                     std::optional<double> trim_quantile,
                                     const Grouping& grouping) {
  nonprob.validate();
  population.validate();
  if (!(nonprob.schema() == population.schema)) {
    throw data_error("dr_mean: sample and population schemas differ");
  }
  if (propensities.size() != nonprob.size()) {
    throw data_error("dr_mean: propensity count does not match units");
  }
  const Eigen::MatrixXd X = design.matrix_for_units(nonprob);
  const auto n = static_cast<Eigen::Index>(nonprob.size());
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!nonprob.outcome_observed(static_cast<std::size_t>(i))) {
      throw data_error("dr_mean: unit without outcome");
    }
    y[i] = nonprob.outcome(static_cast<std::size_t>(i));
  }
  const Eigen::VectorXd beta = weighted_least_squares(X, y, Eigen::VectorXd::Ones(n));
  const Eigen::VectorXd resid = y - X * beta;

  WeightVector w;
  w.values.reserve(propensities.size());
  for (double p : propensities) {
    if (!(p > 0.0 && p <= 1.0)) throw data_error("dr_mean: propensities must lie in (0, 1]");
    w.values.push_back(1.0 / p);
  }
  apply_trim(w, trim_quantile);

  Eigen::RowVectorXd xrow(static_cast<Eigen::Index>(design.n_columns()));
  std::vector<EstimateSummary> out;
  for (const auto& group : grouping.groups) {
    // Population average of model predictions over the group's cells.
    double pred_sum = 0.0;
    double pop_mass = 0.0;
    for (const auto& cell : population.rows) {
      if (!Grouping::contains(group, cell.key)) continue;
      if (cell.count <= 0.0) continue;
      design.fill_row(cell.key, std::nullopt, xrow);
      pred_sum += cell.count * xrow.dot(beta);
      pop_mass += cell.count;
    }
    if (!(pop_mass > 0.0)) {
      throw data_error("dr_mean: group '" + group.label + "' has no population mass");
    }
    // Hajek residual correction within the group.
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!Grouping::contains(group, nonprob.key_of(static_cast<std::size_t>(i)))) continue;
      num += w.values[static_cast<std::size_t>(i)] * resid[i];
      den += w.values[static_cast<std::size_t>(i)];
    }
    if (!(den > 0.0)) throw data_error("dr_mean: group '" + group.label + "' has no sampled units");
    out.push_back(wald_summary(group.label, "DR", pred_sum / pop_mass + num / den, 0.0));
  }
  return out;
}

JackknifeResult jackknife_se(std::size_t n_units, int n_groups, std::uint64_t seed,
                             const std::function<std::vector<double>(const std::vector<int>&)>& estimate) {
  if (n_groups < 2) throw data_error("jackknife_se: need at least 2 groups");
  if (n_units < static_cast<std::size_t>(n_groups)) {
    throw data_error("jackknife_se: more groups than units");
  }
  Rng rng(seed);
  const auto perm = rng.permutation(static_cast<int>(n_units));
  // Systematic assignment over a shuffled order gives near-equal group sizes.
  std::vector<int> group_of(n_units);
  for (std::size_t i = 0; i < n_units; ++i) {
    group_of[static_cast<std::size_t>(perm[i])] = static_cast<int>(i % static_cast<std::size_t>(n_groups));
  }
  std::vector<std::vector<double>> replicates;  // one vector per successful replicate
  JackknifeResult result;
  std::size_t n_components = 0;
  for (int g = 0; g < n_groups; ++g) {
    std::vector<int> keep;
    keep.reserve(n_units);
    for (std::size_t i = 0; i < n_units; ++i) {
      if (group_of[i] != g) keep.push_back(static_cast<int>(i));
    }
    try {
      auto rep = estimate(keep);
      if (n_components == 0) n_components = rep.size();
      if (rep.size() != n_components) {
        throw data_error("jackknife_se: estimator changed output length between replicates");
      }
      replicates.push_back(std::move(rep));
    } catch (const data_error&) {
      result.failed_replicates.push_back(g);
    } catch (const numeric_error&) {
      result.failed_replicates.push_back(g);
    }
  }
  if (replicates.empty()) throw numeric_error("jackknife_se: every replicate failed");

  result.se.assign(n_components, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < n_components; ++k) {
    std::vector<double> vals;
    vals.reserve(replicates.size());
    for (const auto& rep : replicates) {
      if (std::isfinite(rep[k])) vals.push_back(rep[k]);
    }
    if (vals.size() < 2) continue;  // se stays NaN
    const double mean_rep = mean_of(vals);
    double ss = 0.0;
    for (double r : vals) ss += (r - mean_rep) * (r - mean_rep);
    const double G = static_cast<double>(vals.size());
    result.se[k] = std::sqrt((G - 1.0) / G * ss);
  }
  return result;
}

double jackknife_se_scalar(std::size_t n_units, int n_groups, std::uint64_t seed,
                           const std::function<double(const std::vector<int>&)>& estimate) {
  const auto res = jackknife_se(n_units, n_groups, seed, [&](const std::vector<int>& keep) {
    return std::vector<double>{estimate(keep)};
  });
  return res.se.at(0);
}

}  // namespace popstrat
