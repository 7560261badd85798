#include "popstrat/microdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace popstrat {

Microdata::Microdata(CovariateSchema schema) : schema_(std::move(schema)) {
  schema_.validate();
  covariates_.resize(schema_.n_vars());
}

void Microdata::append(const std::vector<int>& levels, std::optional<double> outcome,
                       std::optional<double> weight, std::optional<int> included) {
  if (levels.size() != schema_.n_vars()) throw data_error("append: wrong covariate arity");
  for (std::size_t v = 0; v < levels.size(); ++v) {
    if (levels[v] < 0 || static_cast<std::size_t>(levels[v]) >= schema_.variables[v].levels.size()) {
      throw data_error("append: level out of range for variable '" + schema_.variables[v].name + "'");
    }
    covariates_[v].push_back(levels[v]);
  }
  if (outcome || has_outcome_) {
    if (!has_outcome_) {
      outcome_.assign(n_, std::numeric_limits<double>::quiet_NaN());
      has_outcome_ = true;
    }
    outcome_.push_back(outcome ? *outcome : std::numeric_limits<double>::quiet_NaN());
  }
  if (weight || has_weight_) {
    if (!has_weight_) {
      weight_.assign(n_, 1.0);
      has_weight_ = true;
    }
    weight_.push_back(weight ? *weight : 1.0);
  }
  if (included || has_included_) {
    if (!has_included_) {
      included_.assign(n_, 0);
      has_included_ = true;
    }
    included_.push_back(included ? *included : 0);
  }
  ++n_;
}

CellKey Microdata::key_of(std::size_t unit) const {
  CellKey key;
  key.levels.reserve(schema_.n_vars());
  for (std::size_t v = 0; v < schema_.n_vars(); ++v) key.levels.push_back(covariates_[v][unit]);
  return key;
}

std::size_t Microdata::rank_of(std::size_t unit) const {
  std::size_t rank = 0;
  for (std::size_t v = 0; v < schema_.n_vars(); ++v) {
    rank = rank * schema_.variables[v].levels.size() + static_cast<std::size_t>(covariates_[v][unit]);
  }
  return rank;
}

bool Microdata::outcome_observed(std::size_t unit) const {
  return has_outcome_ && !std::isnan(outcome_[unit]);
}

std::vector<double> Microdata::observed_outcomes() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < n_; ++i) {
    if (outcome_observed(i)) out.push_back(outcome_[i]);
  }
  return out;
}

Microdata Microdata::subset(const std::vector<int>& units) const {
  Microdata out(schema_);
  for (int u : units) {
    if (u < 0 || static_cast<std::size_t>(u) >= n_) throw data_error("subset: unit index out of range");
    const auto i = static_cast<std::size_t>(u);
    std::vector<int> levels;
    levels.reserve(schema_.n_vars());
    for (std::size_t v = 0; v < schema_.n_vars(); ++v) levels.push_back(covariates_[v][i]);
    std::optional<double> y;
    if (has_outcome_) y = outcome_[i];
    std::optional<double> w;
    if (has_weight_) w = weight_[i];
    std::optional<int> inc;
    if (has_included_) inc = included_[i];
    out.append(levels, y, w, inc);
  }
  return out;
}

void Microdata::validate() const {
  schema_.validate();
  for (std::size_t v = 0; v < schema_.n_vars(); ++v) {
    if (covariates_[v].size() != n_) throw data_error("microdata column length mismatch");
  }
  if (has_outcome_ && outcome_.size() != n_) throw data_error("outcome column length mismatch");
  if (has_weight_) {
    if (weight_.size() != n_) throw data_error("weight column length mismatch");
    for (double w : weight_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw data_error("weights must be finite and nonnegative");
    }
  }
  if (has_included_) {
    if (included_.size() != n_) throw data_error("included column length mismatch");
    for (int f : included_) {
      if (f != 0 && f != 1) throw data_error("included flag must be 0 or 1");
    }
  }
}

CovariateSchema infer_schema(const std::vector<std::string>& var_names,
                             const std::vector<std::vector<std::string>>& label_columns) {
  if (var_names.size() != label_columns.size()) throw data_error("infer_schema: column mismatch");
  CovariateSchema schema;
  for (std::size_t v = 0; v < var_names.size(); ++v) {
    std::set<std::string> levels(label_columns[v].begin(), label_columns[v].end());
    CovariateSchema::Variable var;
    var.name = var_names[v];
    var.levels.assign(levels.begin(), levels.end());
    schema.variables.push_back(std::move(var));
  }
  schema.validate();
  return schema;
}

Microdata Microdata::from_csv_table(const CsvTable& table, std::string_view context,
                                    const std::optional<CovariateSchema>& schema_in) {
  const auto outcome_col = table.column("outcome");
  const auto weight_col = table.column("weight");
  const auto included_col = table.column("included");

  std::vector<std::string> var_names;
  std::vector<std::size_t> var_cols;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    const auto& name = table.header[c];
    if (name == "outcome" || name == "weight" || name == "included") continue;
    var_names.push_back(name);
    var_cols.push_back(c);
  }
  if (var_names.empty()) throw data_error(std::string(context) + ": no covariate columns");

  CovariateSchema schema;
  if (schema_in) {
    schema = *schema_in;
    schema.validate();
    var_cols.clear();
    for (const auto& v : schema.variables) var_cols.push_back(table.require_column(v.name, context));
  } else {
    std::vector<std::vector<std::string>> label_cols(var_names.size());
    for (std::size_t k = 0; k < var_cols.size(); ++k) {
      for (const auto& row : table.rows) label_cols[k].push_back(row[var_cols[k]]);
    }
    schema = infer_schema(var_names, label_cols);
  }

  Microdata out(schema);
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string ctx = std::string(context) + ": row " + std::to_string(r + 2);
    std::vector<int> levels;
    levels.reserve(schema.n_vars());
    for (std::size_t v = 0; v < schema.n_vars(); ++v) {
      const auto lev = schema.level_index(v, row[var_cols[v]]);
      if (!lev) {
        throw data_error(ctx + ": unknown level '" + row[var_cols[v]] + "' for variable '" +
                         schema.variables[v].name + "'");
      }
      levels.push_back(*lev);
    }
    std::optional<double> y;
    if (outcome_col && !row[*outcome_col].empty()) y = parse_double(row[*outcome_col], ctx);
    std::optional<double> w;
    if (weight_col) {
      if (row[*weight_col].empty()) throw data_error(ctx + ": empty weight");
      w = parse_double(row[*weight_col], ctx);
      if (!(*w >= 0.0)) throw data_error(ctx + ": negative weight");
    }
    std::optional<int> inc;
    if (included_col) {
      if (row[*included_col].empty()) throw data_error(ctx + ": empty included flag");
      const long long f = parse_int(row[*included_col], ctx);
      if (f != 0 && f != 1) throw data_error(ctx + ": included flag must be 0 or 1");
      inc = static_cast<int>(f);
    }
    // Keep columns present even when the first row lacks a value.
    if (outcome_col && !out.has_outcome_ && !y) {
      out.has_outcome_ = true;
      out.outcome_.assign(out.n_, std::numeric_limits<double>::quiet_NaN());
    }
    out.append(levels, y, w, inc);
  }
  if (outcome_col) out.has_outcome_ = true;
  out.validate();
  return out;
}

Microdata Microdata::read_csv(const std::string& path,
                              const std::optional<CovariateSchema>& schema) {
  return from_csv_table(read_csv_file(path), path, schema);
}

void Microdata::write_csv(const std::string& path) const {
  CsvTable csv;
  for (const auto& v : schema_.variables) csv.header.push_back(v.name);
  if (has_outcome_) csv.header.push_back("outcome");
  if (has_weight_) csv.header.push_back("weight");
  if (has_included_) csv.header.push_back("included");
  for (std::size_t i = 0; i < n_; ++i) {
    std::vector<std::string> row;
    row.reserve(csv.header.size());
    for (std::size_t v = 0; v < schema_.n_vars(); ++v) {
      row.push_back(schema_.variables[v].levels[static_cast<std::size_t>(covariates_[v][i])]);
    }
    if (has_outcome_) row.push_back(outcome_observed(i) ? format_double(outcome_[i]) : std::string());
    if (has_weight_) row.push_back(format_double(weight_[i]));
    if (has_included_) row.push_back(std::to_string(included_[i]));
    csv.rows.push_back(std::move(row));
  }
  write_csv_file(path, csv);
}

Microdata concat_for_inclusion(const Microdata& nonprob, const Microdata& reference) {
  if (!(nonprob.schema() == reference.schema())) {
    throw data_error("concat_for_inclusion: schemas differ");
  }
  Microdata out(nonprob.schema());
  const auto copy_units = [&](const Microdata& src, int flag) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::vector<int> levels;
      levels.reserve(src.schema().n_vars());
      for (std::size_t v = 0; v < src.schema().n_vars(); ++v) {
        levels.push_back(src.level(v, i));
      }
      std::optional<double> y;
      if (src.has_outcome_column() && src.outcome_observed(i)) y = src.outcome(i);
      out.append(levels, y, src.weight(i), flag);
    }
  };
  copy_units(nonprob, 1);
  copy_units(reference, 0);
  return out;
}

}  // namespace popstrat
