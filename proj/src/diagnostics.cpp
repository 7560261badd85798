#include "popstrat/diagnostics.hpp"

#include <cmath>
#include <set>

#include "popstrat/common.hpp"

namespace popstrat {

double PopulationSpec::total() const {
  double t = 0.0;
  for (const auto& c : cells) t += c.N;
  return t;
}

double PopulationSpec::psi_bar() const {
  const double N = total();
  double p = 0.0;
  for (const auto& c : cells) p += c.N * c.psi;
  return N > 0.0 ? p / N : 0.0;
}

double PopulationSpec::population_mean() const {
  const double N = total();
  double m = 0.0;
  for (const auto& c : cells) {
    m += c.N * (c.psi * c.mean_respondents + (1.0 - c.psi) * c.mean_nonrespondents);
  }
  return m / N;
}

double PopulationSpec::respondent_mean() const {
  double num = 0.0;
  double den = 0.0;
  for (const auto& c : cells) {
    num += c.N * c.psi * c.mean_respondents;
    den += c.N * c.psi;
  }
  return num / den;
}

void PopulationSpec::validate() const {
  if (cells.empty()) throw data_error("population spec has no cells");
  if (schema) schema->validate();
  for (const auto& c : cells) {
    if (!(c.N > 0.0)) throw data_error("population spec: cell size must be positive");
    if (!(c.psi > 0.0 && c.psi <= 1.0)) {
      throw data_error("population spec: psi must lie in (0, 1]");
    }
    if (!(c.sd > 0.0)) throw data_error("population spec: within-cell sd must be positive");
    if (!std::isfinite(c.mean_respondents) || !std::isfinite(c.mean_nonrespondents)) {
      throw data_error("population spec: non-finite cell mean");
    }
    if (schema) {
      cell_rank(*schema, c.key);  // bounds check
    }
  }
  if (schema) {
    std::set<CellKey> seen;
    for (const auto& c : cells) {
      if (!seen.insert(c.key).second) {
        throw data_error("population spec: duplicate cell " + cell_label(*schema, c.key));
      }
    }
  }
  if (!(psi_bar() > 0.0)) throw data_error("population spec: psi_bar is zero");
}

PopulationSpec read_population_spec_csv(const CsvTable& table) {
  const std::vector<std::string> reserved = {"N", "psi", "meanR", "meanM", "sd"};
  std::vector<std::string> covars;
  for (const auto& name : table.header) {
    bool is_reserved = false;
    for (const auto& r : reserved) {
      if (name == r) is_reserved = true;
    }
    if (!is_reserved) covars.push_back(name);
  }

  PopulationSpec spec;
  std::vector<std::size_t> covar_cols;
  if (!covars.empty()) {
    CovariateSchema schema;
    for (const auto& name : covars) {
      const auto col = table.require_column(name, "population spec");
      covar_cols.push_back(col);
      std::set<std::string> uniq;
      for (const auto& row : table.rows) uniq.insert(row[col]);
      CovariateSchema::Variable v;
      v.name = name;
      v.levels.assign(uniq.begin(), uniq.end());
      schema.variables.push_back(std::move(v));
    }
    spec.schema = std::move(schema);
  }

  const auto c_N = table.require_column("N", "population spec");
  const auto c_psi = table.require_column("psi", "population spec");
  const auto c_mr = table.require_column("meanR", "population spec");
  const auto c_mm = table.require_column("meanM", "population spec");
  const auto c_sd = table.require_column("sd", "population spec");
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    PopulationSpecCell cell;
    cell.N = parse_double(row[c_N], "column N");
    cell.psi = parse_double(row[c_psi], "column psi");
    cell.mean_respondents = parse_double(row[c_mr], "column meanR");
    cell.mean_nonrespondents = parse_double(row[c_mm], "column meanM");
    cell.sd = parse_double(row[c_sd], "column sd");
    if (spec.schema) {
      for (std::size_t v = 0; v < covar_cols.size(); ++v) {
        const auto lvl = spec.schema->level_index(v, row[covar_cols[v]]);
        if (!lvl) throw data_error("population spec: unknown level '" + row[covar_cols[v]] + "'");
        cell.key.levels.push_back(*lvl);
      }
      cell.label = cell_label(*spec.schema, cell.key);
    } else {
      cell.label = "cell " + std::to_string(r + 1);
    }
    spec.cells.push_back(std::move(cell));
  }
  spec.validate();
  return spec;
}

PopulationSpec read_population_spec_file(const std::string& path) {
  return read_population_spec_csv(read_csv_file(path));
}

BiasRecord analytic_bias(const PopulationSpec& spec, double sigma_theta, double n_total) {
  spec.validate();
  if (!(n_total > 0.0)) throw data_error("analytic_bias: expected sample size must be positive");
  double mass = 0.0;
  for (const auto& c : spec.cells) mass += c.N * c.psi;
  std::vector<double> nj;
  nj.reserve(spec.cells.size());
  for (const auto& c : spec.cells) nj.push_back(n_total * c.N * c.psi / mass);
  return analytic_bias(spec, sigma_theta, nj);
}

BiasRecord analytic_bias(const PopulationSpec& spec, double sigma_theta,
                         const std::vector<double>& expected_nj) {
  spec.validate();
  if (!(sigma_theta > 0.0)) throw data_error("analytic_bias: sigma_theta must be positive");
  if (expected_nj.size() != spec.cells.size()) {
    throw data_error("analytic_bias: expected_nj length mismatch");
  }
  const double N = spec.total();
  const double psi_bar = spec.psi_bar();
  if (!(psi_bar > 0.0)) throw data_error("analytic_bias: psi_bar is zero");
  const double ybar_R = spec.respondent_mean();

  BiasRecord out;
  for (std::size_t j = 0; j < spec.cells.size(); ++j) {
    const auto& c = spec.cells[j];
    if (!(expected_nj[j] > 0.0)) throw data_error("analytic_bias: expected n_j must be positive");
    const double w = c.N / N;
    const double contrast = c.mean_respondents - c.mean_nonrespondents;
    out.A += w * (c.mean_respondents - ybar_R) * (c.psi - psi_bar) / psi_bar;
    out.B += w * (1.0 - c.psi) * contrast;

    const double delta = c.sd * c.sd / (expected_nj[j] * sigma_theta * sigma_theta);
    const double shrink = delta / (1.0 + delta);
    out.bias_mrp += w * (1.0 - shrink) * (1.0 - c.psi) * contrast;
    out.bias_mrp += w * shrink *
                    (ybar_R - c.psi * c.mean_respondents - (1.0 - c.psi) * c.mean_nonrespondents);
  }
  out.bias_unw = out.A + out.B;
  out.bias_ps = out.B;

  // Stochastic-model forms. The unweighted one takes the covariance between
  // the cell propensities and the full-cell means; the poststratified one
  // uses the within-cell response/outcome covariance psi(1-psi)(YbarR-YbarM).
  const double ybar = spec.population_mean();
  for (const auto& c : spec.cells) {
    const double w = c.N / N;
    const double cell_mean = c.psi * c.mean_respondents + (1.0 - c.psi) * c.mean_nonrespondents;
    out.approx_bias_unw += w * (c.psi - psi_bar) * (cell_mean - ybar) / psi_bar;
    out.approx_bias_ps +=
        w * (1.0 - c.psi) * (c.mean_respondents - c.mean_nonrespondents);
  }
  return out;
}

VarianceRecord conditional_variances(const CellTable& sample, const CellTable& population,
                                     const std::vector<double>& delta) {
  sample.validate();
  population.validate();
  if (!(sample.schema == population.schema)) {
    throw data_error("conditional_variances: sample and population schemas differ");
  }
  if (delta.size() != sample.rows.size()) {
    throw data_error("conditional_variances: delta length mismatch");
  }
  const double N = population.total_count();
  if (!(N > 0.0)) throw data_error("conditional_variances: empty population");
  double n = 0.0;
  for (const auto& row : sample.rows) n += row.count;

  VarianceRecord out;
  for (std::size_t j = 0; j < sample.rows.size(); ++j) {
    const auto& row = sample.rows[j];
    if (!(row.count > 0.0)) {
      throw data_error("conditional_variances: zero sample count in cell " +
                       cell_label(sample.schema, row.key));
    }
    if (!row.variance) {
      throw data_error("conditional_variances: missing variance in cell " +
                       cell_label(sample.schema, row.key));
    }
    const CellRow* pop = population.find(row.key);
    if (!pop || !(pop->count > 0.0)) {
      throw data_error("conditional_variances: sample cell " + cell_label(sample.schema, row.key) +
                       " has no population count");
    }
    const double nj = row.count;
    const double s2 = *row.variance;
    const double Nj = pop->count;
    const double d = delta[j];
    if (!(d >= 0.0)) throw data_error("conditional_variances: delta must be nonnegative");

    out.var_unw += (nj / (n * n)) * s2;
    out.var_ps += (Nj * Nj / (N * N)) * (1.0 - nj / Nj) * s2 / nj;
    const double a = 1.0 / (1.0 + d);
    const double b = d / (1.0 + d);
    out.var_mrp += (Nj * Nj / (N * N)) *
                   (a * a * s2 / nj + b * b * (nj / (n * n)) * s2 + 2.0 * a * b * s2 / n);
  }
  return out;
}

VarianceRecord expected_variances(const PopulationSpec& spec, double sigma_theta, double n_total) {
  spec.validate();
  if (!(sigma_theta > 0.0)) throw data_error("expected_variances: sigma_theta must be positive");
  if (!(n_total > 0.0)) {
    throw data_error("expected_variances: expected sample size must be positive");
  }
  double mass = 0.0;
  for (const auto& c : spec.cells) mass += c.N * c.psi;
  const double N = spec.total();

  VarianceRecord out;
  for (const auto& c : spec.cells) {
    const double nj = n_total * c.N * c.psi / mass;
    const double s2 = c.sd * c.sd;
    const double d = s2 / (nj * sigma_theta * sigma_theta);
    out.var_unw += (nj / (n_total * n_total)) * s2;
    out.var_ps += (c.N * c.N / (N * N)) * (1.0 - nj / c.N) * s2 / nj;
    const double a = 1.0 / (1.0 + d);
    const double b = d / (1.0 + d);
    out.var_mrp += (c.N * c.N / (N * N)) *
                   (a * a * s2 / nj + b * b * (nj / (n_total * n_total)) * s2 +
                    2.0 * a * b * s2 / n_total);
  }
  return out;
}

}  // namespace popstrat
