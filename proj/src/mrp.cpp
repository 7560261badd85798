#include "popstrat/mrp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "popstrat/wfpbb.hpp"

namespace popstrat {

MrpVariant parse_variant(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::toupper(c); });
  if (t == "S") return MrpVariant::S;
  if (t == "P") return MrpVariant::P;
  if (t == "R") return MrpVariant::R;
  if (t == "INT") return MrpVariant::INT;
  throw data_error("unknown MRP variant: '" + std::string(text) + "' (expected S, P, R, or INT)");
}

std::string_view to_string(MrpVariant variant) {
  switch (variant) {
    case MrpVariant::S: return "S";
    case MrpVariant::P: return "P";
    case MrpVariant::R: return "R";
    case MrpVariant::INT: return "INT";
  }
  return "?";
}

std::optional<std::size_t> PsiPredictor::find(const CovariateSchema& schema,
                                              const CellKey& key) const {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] == key) return i;
  }
  (void)schema;
  return std::nullopt;
}

PsiPredictor build_psi_predictors(const std::vector<CellKey>& cells,
                                  const std::vector<double>& psi_by_cell, int digits) {
  if (cells.size() != psi_by_cell.size()) {
    throw data_error("build_psi_predictors: cells and psi values differ in length");
  }
  if (digits < 0 || digits > 9) throw data_error("build_psi_predictors: digits must be in [0, 9]");
  PsiPredictor out;
  out.cells = cells;
  out.psi = psi_by_cell;
  out.digits = digits;
  const double scale = std::pow(10.0, digits);
  std::vector<long long> rounded(cells.size());
  std::set<long long> uniq;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!(psi_by_cell[i] > 0.0 && psi_by_cell[i] < 1.0)) {
      throw data_error("build_psi_predictors: psi values must lie in (0, 1)");
    }
    rounded[i] = std::llround(psi_by_cell[i] * scale);
    uniq.insert(rounded[i]);
  }
  std::map<long long, int> id;
  for (long long v : uniq) id.emplace(v, static_cast<int>(id.size()));
  out.group.resize(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) out.group[i] = id[rounded[i]];
  out.n_groups = static_cast<int>(uniq.size());
  return out;
}

PsiPredictor build_psi_predictors(const PosteriorDraws& inclusion_fit,
                                  const ModelFormula& inclusion_formula, const CellTable& cells,
                                  int digits) {
  const Design design(cells.schema, inclusion_formula);
  std::vector<CellKey> keys;
  keys.reserve(cells.rows.size());
  for (const auto& row : cells.rows) keys.push_back(row.key);
  const Eigen::MatrixXd X = design.matrix_for_cells(keys);
  // Coefficient draws in design-column order.
  Eigen::MatrixXd B(inclusion_fit.draws.rows(), X.cols());
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    B.col(k) = inclusion_fit.draws.col(
        static_cast<Eigen::Index>(inclusion_fit.index_of(design.column_names()[static_cast<std::size_t>(k)])));
  }
  const Eigen::MatrixXd eta = B * X.transpose();  // T x J
  std::vector<double> psi(keys.size());
  std::vector<double> buf(static_cast<std::size_t>(eta.rows()));
  for (std::size_t j = 0; j < keys.size(); ++j) {
    for (Eigen::Index t = 0; t < eta.rows(); ++t) {
      buf[static_cast<std::size_t>(t)] = 1.0 / (1.0 + std::exp(-eta(t, static_cast<Eigen::Index>(j))));
    }
    psi[j] = quantile(buf, 0.5);
  }
  return build_psi_predictors(keys, psi, digits);
}

std::vector<EstimateSummary> shrinkage_estimate(const CellTable& sample,
                                                const CellTable& population, double sigma_theta,
                                                const Grouping& grouping) {
  sample.validate();
  population.validate();
  if (!(sample.schema == population.schema)) {
    throw data_error("shrinkage_estimate: sample and population schemas differ");
  }
  if (!(sigma_theta > 0.0)) throw data_error("shrinkage_estimate: sigma_theta must be positive");

  // Overall unweighted sample mean (the exchangeable shrinkage target) and
  // the pooled variance for cells lacking one.
  double n_total = 0.0;
  double y_total = 0.0;
  double pooled_num = 0.0;
  double pooled_den = 0.0;
  for (const auto& row : sample.rows) {
    if (!(row.count > 0.0)) throw data_error("shrinkage_estimate: sample cell with zero count");
    if (!row.mean) throw data_error("shrinkage_estimate: sample cell without outcome mean");
    n_total += row.count;
    y_total += row.count * *row.mean;
    if (row.variance && row.count > 1.0) {
      pooled_num += (row.count - 1.0) * *row.variance;
      pooled_den += row.count - 1.0;
    }
  }
  const double ybar_s = y_total / n_total;
  const std::optional<double> pooled =
      pooled_den > 0.0 ? std::optional<double>(pooled_num / pooled_den) : std::nullopt;

  struct CellEst {
    CellKey key;
    double weight = 0.0;
    double theta = 0.0;
  };
  std::vector<CellEst> cells;
  for (const auto& row : sample.rows) {
    const CellRow* pop = population.find(row.key);
    if (!pop || !(pop->count > 0.0)) {
      throw data_error("shrinkage_estimate: sample cell " + cell_label(sample.schema, row.key) +
                       " has no population count");
    }
    double s2;
    if (row.variance) {
      s2 = *row.variance;
    } else if (pooled) {
      s2 = *pooled;
    } else {
      throw data_error("shrinkage_estimate: no cell variances available to pool");
    }
    const double delta = s2 / (row.count * sigma_theta * sigma_theta);
    CellEst c;
    c.key = row.key;
    c.weight = pop->count;
    c.theta = (*row.mean + delta * ybar_s) / (1.0 + delta);
    cells.push_back(std::move(c));
  }

  std::vector<EstimateSummary> out;
  for (const auto& group : grouping.groups) {
    double wsum = 0.0;
    double est = 0.0;
    for (const auto& c : cells) {
      if (!Grouping::contains(group, c.key)) continue;
      wsum += c.weight;
      est += c.weight * c.theta;
    }
    out.push_back(wald_summary(group.label, "shrinkage",
                               wsum > 0.0 ? est / wsum : std::nan(""), 0.0));
  }
  return out;
}

std::vector<std::vector<double>> poststratify_draws(const Eigen::MatrixXd& cell_draws,
                                                    const Eigen::MatrixXd& weights,
                                                    const std::vector<CellKey>& cells,
                                                    const Grouping& grouping) {
  const auto T = cell_draws.rows();
  const auto J = cell_draws.cols();
  if (static_cast<std::size_t>(J) != cells.size()) {
    throw data_error("poststratify_draws: cell count mismatch");
  }
  if (weights.cols() != J || (weights.rows() != 1 && weights.rows() != T)) {
    throw data_error("poststratify_draws: weights must be 1 x J or T x J");
  }
  if (weights.minCoeff() < 0.0) throw data_error("poststratify_draws: negative weights");
  const bool per_draw = weights.rows() == T;

  std::vector<std::vector<double>> out;
  out.reserve(grouping.groups.size());
  for (const auto& group : grouping.groups) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < J; ++j) {
      if (Grouping::contains(group, cells[static_cast<std::size_t>(j)])) cols.push_back(j);
    }
    std::vector<double> draws(static_cast<std::size_t>(T));
    for (Eigen::Index t = 0; t < T; ++t) {
      const Eigen::Index wrow = per_draw ? t : 0;
      double num = 0.0;
      double den = 0.0;
      for (const auto j : cols) {
        const double w = weights(wrow, j);
        num += w * cell_draws(t, j);
        den += w;
      }
      if (!(den > 0.0)) {
        throw data_error("poststratify_draws: group '" + group.label +
                         "' has zero total weight in draw " + std::to_string(t));
      }
      draws[static_cast<std::size_t>(t)] = num / den;
    }
    out.push_back(std::move(draws));
  }
  return out;
}

namespace {

struct VariantTraits {
  bool population_cells = false;
  bool reference_cells = false;
  bool estimated_counts = false;
  bool uses_psi = false;
};

VariantTraits traits_of(MrpVariant v) {
  switch (v) {
    case MrpVariant::S: return {false, false, false, false};
    case MrpVariant::P: return {true, false, false, false};
    case MrpVariant::R: return {false, true, true, false};
    case MrpVariant::INT: return {true, false, false, true};
  }
  throw data_error("unknown variant");
}

}  // namespace

MrpResult mrp_estimate(MrpVariant variant, const Microdata& sample, const CellTable& population,
                       const Microdata* reference, const OutcomeModelSpec& spec,
                       const McmcConfig& cfg, const Grouping& grouping,
                       const MrpOptions& options) {
  sample.validate();
  population.validate();
  cfg.validate();
  const VariantTraits tr = traits_of(variant);
  if (!(sample.schema() == population.schema)) {
    throw data_error("mrp_estimate: sample and population schemas differ");
  }
  if ((tr.reference_cells || tr.uses_psi) && reference == nullptr) {
    throw data_error(std::string("mrp_estimate: variant ") + std::string(to_string(variant)) +
                     " requires a reference sample");
  }
  if (reference && !(reference->schema() == sample.schema())) {
    throw data_error("mrp_estimate: reference schema differs from sample schema");
  }

  OutcomeModelSpec model = spec;
  if (tr.uses_psi) {
    // The INT variant's model always carries the psi predictors.
    model.formula.psi_fixed = true;
    model.formula.psi_varying = true;
    if (model.formula.text.find("psi") == std::string::npos) {
      model.formula.text += "+psi+(1|psi)";
    }
  } else if (model.formula.psi_fixed || model.formula.psi_varying) {
    throw data_error(std::string("mrp_estimate: variant ") + std::string(to_string(variant)) +
                     " does not use psi predictors");
  }

  MrpResult result;
  const CellTable sample_cells = build_cell_table(sample, CellRole::sample);

  // Prediction cell set and fixed weights.
  std::vector<CellKey> cells;
  std::vector<double> fixed_weights;
  std::vector<CellTable> nhat_tables;
  if (tr.population_cells) {
    for (const auto& row : population.rows) {
      if (row.count > 0.0) {
        cells.push_back(row.key);
        fixed_weights.push_back(row.count);
      }
    }
  } else if (tr.reference_cells) {
    // Cells observed in the reference sample; counts estimated by WFPBB.
    const CellTable ref_cells = build_cell_table(*reference, CellRole::reference);
    for (const auto& row : ref_cells.rows) cells.push_back(row.key);
    // Total N is known even when cell counts are not; fall back to the sum
    // of reference design weights when no population table is supplied.
    double total = population.rows.empty() ? 0.0 : population.total_count();
    if (!(total > 0.0)) {
      for (std::size_t i = 0; i < reference->size(); ++i) total += reference->weight(i);
    }
    const auto N = static_cast<long long>(std::llround(total));
    Rng rng(derive_seed(cfg.seed, 0x33));
    std::vector<SyntheticPopulation> pops;
    nhat_tables = estimate_pop_cells(*reference, N, options.wfpbb_populations, rng, &pops);
    for (const auto& p : pops) result.wfpbb_clamped += p.clamped_units;
  } else {
    // Sample-observed cells with known population counts.
    for (const auto& row : sample_cells.rows) {
      const CellRow* pop = population.find(row.key);
      if (!pop || !(pop->count > 0.0)) {
        throw data_error("mrp_estimate: sample cell " + cell_label(sample.schema(), row.key) +
                         " missing from the population table");
      }
      cells.push_back(row.key);
      fixed_weights.push_back(pop->count);
    }
  }
  if (cells.empty()) throw data_error("mrp_estimate: empty prediction cell set");

  // Uncovered population mass (cells outside the prediction set).
  {
    double total = 0.0;
    double covered = 0.0;
    std::set<CellKey> cell_set(cells.begin(), cells.end());
    for (const auto& row : population.rows) {
      total += row.count;
      if (cell_set.count(row.key)) covered += row.count;
    }
    if (total > 0.0) result.uncovered_mass = (total - covered) / total;
  }

  // Inclusion model and psi predictors (INT only).
  PsiPredictor psi;
  std::vector<double> psi_by_unit;
  std::vector<int> group_by_unit;
  double logistic_max_rhat = 1.0;
  if (tr.uses_psi) {
    const Microdata stacked = concat_for_inclusion(sample, *reference);
    const ModelFormula incl_formula = main_effects_formula(sample.schema());
    McmcConfig incl_cfg = cfg;
    incl_cfg.seed = derive_seed(cfg.seed, 0x55);
    const PosteriorDraws incl_fit = sample_posterior_logistic(incl_formula, stacked, incl_cfg);
    for (double r : rhat(incl_fit)) logistic_max_rhat = std::max(logistic_max_rhat, r);

    // psi for the union of prediction cells and sample-observed cells.
    CellTable psi_cells = population;
    {
      std::set<CellKey> have;
      for (const auto& row : psi_cells.rows) have.insert(row.key);
      std::vector<CellRow> extra;
      for (const auto& row : sample_cells.rows) {
        if (!have.count(row.key)) {
          CellRow r;
          r.key = row.key;
          r.count = 0.0;
          extra.push_back(std::move(r));
        }
      }
      for (auto& r : extra) psi_cells.rows.push_back(std::move(r));
      std::sort(psi_cells.rows.begin(), psi_cells.rows.end(),
                [](const CellRow& a, const CellRow& b) { return a.key < b.key; });
    }
    psi = build_psi_predictors(incl_fit, incl_formula, psi_cells, options.psi_digits);

    psi_by_unit.resize(sample.size());
    group_by_unit.resize(sample.size());
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const auto idx = psi.find(sample.schema(), sample.key_of(i));
      if (!idx) throw data_error("mrp_estimate: no psi prediction for a sample unit's cell");
      psi_by_unit[i] = psi.psi[*idx];
      group_by_unit[i] = psi.group[*idx];
    }
  }

  // Outcome model fit.
  PriorSpec used_priors;
  const PosteriorDraws fit = sample_posterior_linear(
      model, sample, cfg, tr.uses_psi ? &psi_by_unit : nullptr,
      tr.uses_psi ? &group_by_unit : nullptr, tr.uses_psi ? psi.n_groups : 0, &used_priors);
  for (double r : rhat(fit)) result.max_rhat = std::max(result.max_rhat, r);
  result.max_rhat = std::max(result.max_rhat, logistic_max_rhat);

  // Coefficient magnitude vs prior scale (exclude the intercept: its prior
  // is centered on the data mean).
  const Design design(sample.schema(), model.formula);
  for (std::size_t k = 1; k < design.n_columns(); ++k) {
    const double scale = used_priors.coef_scales[k - 1];
    const double ratio = std::abs(fit.mean(design.column_names()[k])) / scale;
    result.max_coef_prior_ratio = std::max(result.max_coef_prior_ratio, ratio);
  }

  // Per-draw cell predictions.
  std::vector<double> cell_psi;
  std::vector<int> cell_group;
  if (tr.uses_psi) {
    cell_psi.resize(cells.size());
    cell_group.resize(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto idx = psi.find(sample.schema(), cells[j]);
      if (!idx) throw data_error("mrp_estimate: no psi prediction for cell " +
                                 cell_label(sample.schema(), cells[j]));
      cell_psi[j] = psi.psi[*idx];
      cell_group[j] = psi.group[*idx];
    }
  }
  const Eigen::MatrixXd Xcells =
      design.matrix_for_cells(cells, tr.uses_psi ? &cell_psi : nullptr);
  Eigen::MatrixXd coef_draws(fit.draws.rows(), Xcells.cols());
  for (Eigen::Index k = 0; k < Xcells.cols(); ++k) {
    coef_draws.col(k) =
        fit.draws.col(static_cast<Eigen::Index>(fit.index_of(design.column_names()[static_cast<std::size_t>(k)])));
  }
  Eigen::MatrixXd cell_draws = coef_draws * Xcells.transpose();
  if (tr.uses_psi) {
    for (std::size_t j = 0; j < cells.size(); ++j) {
      cell_draws.col(static_cast<Eigen::Index>(j)) +=
          fit.column("theta[" + std::to_string(cell_group[j]) + "]");
    }
  }

  // Poststratification weights.
  Eigen::MatrixXd weights;
  if (tr.estimated_counts) {
    // Pair each posterior draw with a uniformly chosen synthetic population.
    weights.resize(cell_draws.rows(), static_cast<Eigen::Index>(cells.size()));
    Rng pair_rng(derive_seed(cfg.seed, 0x44));
    for (Eigen::Index t = 0; t < cell_draws.rows(); ++t) {
      const auto& table = nhat_tables[pair_rng.uniform_index(nhat_tables.size())];
      for (std::size_t j = 0; j < cells.size(); ++j) {
        const CellRow* row = table.find(cells[j]);
        weights(t, static_cast<Eigen::Index>(j)) = row ? row->count : 0.0;
      }
    }
  } else {
    weights.resize(1, static_cast<Eigen::Index>(cells.size()));
    for (std::size_t j = 0; j < cells.size(); ++j) {
      weights(0, static_cast<Eigen::Index>(j)) = fixed_weights[j];
    }
  }

  const auto group_draws = poststratify_draws(cell_draws, weights, cells, grouping);
  for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
    const auto& d = group_draws[g];
    EstimateSummary s;
    s.group = grouping.groups[g].label;
    s.method = std::string("MRP-") + std::string(to_string(variant));
    s.estimate = mean_of(d);
    s.se = sd_of(d);
    s.ci_low = quantile(d, 0.025);
    s.ci_high = quantile(d, 0.975);
    result.estimates.push_back(std::move(s));
  }
  return result;
}

}  // namespace popstrat
