#include "popstrat/cells.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "popstrat/csv.hpp"
#include "popstrat/microdata.hpp"

namespace popstrat {

void CovariateSchema::validate() const {
  if (variables.empty()) throw data_error("schema has no variables");
  std::set<std::string> names;
  for (const auto& v : variables) {
    if (v.name.empty()) throw data_error("schema variable with empty name");
    if (!names.insert(v.name).second) throw data_error("duplicate schema variable: " + v.name);
    if (v.levels.empty()) throw data_error("schema variable '" + v.name + "' has no levels");
    std::set<std::string> lv;
    for (const auto& l : v.levels) {
      if (!lv.insert(l).second) {
        throw data_error("schema variable '" + v.name + "' has duplicate level '" + l + "'");
      }
    }
  }
}

std::size_t CovariateSchema::n_cells() const {
  std::size_t n = 1;
  for (const auto& v : variables) n *= v.levels.size();
  return n;
}

std::optional<std::size_t> CovariateSchema::var_index(std::string_view name) const {
  for (std::size_t i = 0; i < variables.size(); ++i) {
    if (variables[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t CovariateSchema::require_var(std::string_view name) const {
  const auto idx = var_index(name);
  if (!idx) throw data_error("unknown covariate: '" + std::string(name) + "'");
  return *idx;
}

std::optional<int> CovariateSchema::level_index(std::size_t var, std::string_view label) const {
  const auto& levels = variables[var].levels;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] == label) return static_cast<int>(i);
  }
  return std::nullopt;
}

bool CovariateSchema::operator==(const CovariateSchema& other) const {
  if (variables.size() != other.variables.size()) return false;
  for (std::size_t i = 0; i < variables.size(); ++i) {
    if (variables[i].name != other.variables[i].name) return false;
    if (variables[i].levels != other.variables[i].levels) return false;
  }
  return true;
}

std::size_t cell_rank(const CovariateSchema& schema, const CellKey& key) {
  if (key.levels.size() != schema.n_vars()) {
    throw data_error("cell key arity does not match schema");
  }
  std::size_t rank = 0;
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    const auto n_levels = schema.variables[v].levels.size();
    const int lev = key.levels[v];
    if (lev < 0 || static_cast<std::size_t>(lev) >= n_levels) {
      throw data_error("cell key level out of range for variable '" + schema.variables[v].name + "'");
    }
    rank = rank * n_levels + static_cast<std::size_t>(lev);
  }
  return rank;
}

CellKey cell_from_rank(const CovariateSchema& schema, std::size_t rank) {
  CellKey key;
  key.levels.assign(schema.n_vars(), 0);
  for (std::size_t v = schema.n_vars(); v-- > 0;) {
    const auto n_levels = schema.variables[v].levels.size();
    key.levels[v] = static_cast<int>(rank % n_levels);
    rank /= n_levels;
  }
  if (rank != 0) throw data_error("cell rank out of range");
  return key;
}

std::vector<CellKey> all_cells(const CovariateSchema& schema) {
  std::vector<CellKey> out;
  out.reserve(schema.n_cells());
  for (std::size_t r = 0; r < schema.n_cells(); ++r) out.push_back(cell_from_rank(schema, r));
  return out;
}

std::string cell_label(const CovariateSchema& schema, const CellKey& key) {
  std::string out;
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    if (v) out.push_back(':');
    out += schema.variables[v].name;
    out.push_back('=');
    out += schema.variables[v].levels[static_cast<std::size_t>(key.levels[v])];
  }
  return out;
}

std::string_view to_string(CellRole role) {
  switch (role) {
    case CellRole::sample: return "sample";
    case CellRole::reference: return "reference";
    case CellRole::population: return "population";
  }
  return "unknown";
}

double CellTable::total_count() const {
  double total = 0.0;
  for (const auto& row : rows) total += row.count;
  return total;
}

const CellRow* CellTable::find(const CellKey& key) const {
  const auto it = std::lower_bound(rows.begin(), rows.end(), key,
                                   [](const CellRow& r, const CellKey& k) { return r.key < k; });
  if (it == rows.end() || !(it->key == key)) return nullptr;
  return &*it;
}

void CellTable::validate() const {
  schema.validate();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    cell_rank(schema, rows[i].key);  // bounds check
    if (!(rows[i].count >= 0.0)) throw data_error("negative cell count");
    if (i > 0 && !(rows[i - 1].key < rows[i].key)) {
      throw data_error("cell table rows not sorted/unique by key");
    }
    if (rows[i].variance && *rows[i].variance < 0.0) throw data_error("negative cell variance");
  }
}

namespace {

CellTable build_table_impl(const Microdata& data, CellRole role, bool weighted) {
  data.validate();
  struct Acc {
    double count = 0.0;
    double wsum = 0.0;   // weight over outcome-observed units
    double mean = 0.0;   // running weighted mean
    double m2 = 0.0;     // running weighted sum of squared deviations
    double n_obs = 0.0;  // unweighted count of outcome-observed units
  };
  std::map<CellKey, Acc> acc;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double w = weighted ? data.weight(i) : 1.0;
    if (!(w >= 0.0)) throw data_error("negative unit weight");
    auto& a = acc[data.key_of(i)];
    a.count += w;
    if (data.outcome_observed(i) && w > 0.0) {
      // West's weighted incremental mean/variance update.
      a.n_obs += 1.0;
      const double y = data.outcome(i);
      const double wsum_new = a.wsum + w;
      const double delta = y - a.mean;
      const double r = delta * w / wsum_new;
      a.mean += r;
      a.m2 += a.wsum * delta * r;
      a.wsum = wsum_new;
    }
  }
  CellTable table;
  table.schema = data.schema();
  table.role = role;
  table.rows.reserve(acc.size());
  for (const auto& [key, a] : acc) {
    CellRow row;
    row.key = key;
    row.count = a.count;
    if (a.n_obs >= 1.0) row.mean = a.mean;
    if (a.n_obs >= 2.0 && a.wsum > 0.0) {
      // Frequency-weight convention: unbiased denominator wsum - 1 when
      // unweighted (w = 1), falls back to wsum otherwise.
      const double denom = weighted ? a.wsum : (a.wsum - 1.0);
      row.variance = (denom > 0.0) ? a.m2 / denom : 0.0;
    }
    table.rows.push_back(std::move(row));
  }
  table.validate();
  return table;
}

}  // namespace

CellTable build_cell_table(const Microdata& data, CellRole role) {
  return build_table_impl(data, role, false);
}

CellTable build_cell_table_weighted(const Microdata& data, CellRole role) {
  return build_table_impl(data, role, true);
}

CellAlignment align_cells(const CellTable& a, const CellTable& b) {
  if (!(a.schema == b.schema)) throw data_error("align_cells: tables have different schemas");
  CellAlignment out;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.rows.size() && j < b.rows.size()) {
    if (a.rows[i].key == b.rows[j].key) {
      out.shared.push_back(a.rows[i].key);
      ++i;
      ++j;
    } else if (a.rows[i].key < b.rows[j].key) {
      out.sample_only.push_back(a.rows[i].key);
      ++i;
    } else {
      out.population_only.push_back(b.rows[j].key);
      ++j;
    }
  }
  for (; i < a.rows.size(); ++i) out.sample_only.push_back(a.rows[i].key);
  for (; j < b.rows.size(); ++j) out.population_only.push_back(b.rows[j].key);
  return out;
}

CellTable read_cell_table_csv(const std::string& path, CellRole role,
                              const std::optional<CovariateSchema>& schema_in) {
  const CsvTable csv = read_csv_file(path);
  const auto count_col = csv.require_column("count", path);
  const auto mean_col = csv.column("mean");
  const auto var_col = csv.column("variance");

  std::vector<std::string> var_names;
  std::vector<std::size_t> var_cols;
  for (std::size_t c = 0; c < csv.header.size(); ++c) {
    const auto& name = csv.header[c];
    if (name == "count" || name == "mean" || name == "variance") continue;
    var_names.push_back(name);
    var_cols.push_back(c);
  }
  if (var_names.empty()) throw data_error(path + ": no covariate columns");

  CovariateSchema schema;
  if (schema_in) {
    schema = *schema_in;
    schema.validate();
    // Bind columns in schema order; all schema variables must be present.
    var_cols.clear();
    for (const auto& v : schema.variables) var_cols.push_back(csv.require_column(v.name, path));
  } else {
    std::vector<std::vector<std::string>> label_cols(var_names.size());
    for (std::size_t k = 0; k < var_cols.size(); ++k) {
      for (const auto& row : csv.rows) label_cols[k].push_back(row[var_cols[k]]);
    }
    schema = infer_schema(var_names, label_cols);
  }

  CellTable table;
  table.schema = schema;
  table.role = role;
  std::map<CellKey, CellRow> rows;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    const auto& row = csv.rows[r];
    const std::string ctx = path + ": row " + std::to_string(r + 2);
    CellKey key;
    key.levels.reserve(schema.n_vars());
    for (std::size_t v = 0; v < schema.n_vars(); ++v) {
      const auto lev = schema.level_index(v, row[var_cols[v]]);
      if (!lev) {
        throw data_error(ctx + ": unknown level '" + row[var_cols[v]] + "' for variable '" +
                         schema.variables[v].name + "'");
      }
      key.levels.push_back(*lev);
    }
    CellRow cell;
    cell.key = key;
    cell.count = parse_double(row[count_col], ctx);
    if (!(cell.count >= 0.0)) throw data_error(ctx + ": negative count");
    if (mean_col && !row[*mean_col].empty()) cell.mean = parse_double(row[*mean_col], ctx);
    if (var_col && !row[*var_col].empty()) cell.variance = parse_double(row[*var_col], ctx);
    if (!rows.emplace(key, std::move(cell)).second) {
      throw data_error(ctx + ": duplicate cell key");
    }
  }
  table.rows.reserve(rows.size());
  for (auto& [key, cell] : rows) table.rows.push_back(std::move(cell));
  table.validate();
  return table;
}

void write_cell_table_csv(const std::string& path, const CellTable& table) {
  bool any_mean = false;
  bool any_var = false;
  for (const auto& row : table.rows) {
    any_mean = any_mean || row.mean.has_value();
    any_var = any_var || row.variance.has_value();
  }
  CsvTable csv;
  for (const auto& v : table.schema.variables) csv.header.push_back(v.name);
  csv.header.push_back("count");
  if (any_mean) csv.header.push_back("mean");
  if (any_var) csv.header.push_back("variance");
  for (const auto& row : table.rows) {
    std::vector<std::string> out;
    out.reserve(csv.header.size());
    for (std::size_t v = 0; v < table.schema.n_vars(); ++v) {
      out.push_back(table.schema.variables[v].levels[static_cast<std::size_t>(row.key.levels[v])]);
    }
    out.push_back(format_double(row.count));
    if (any_mean) out.push_back(row.mean ? format_double(*row.mean) : std::string());
    if (any_var) out.push_back(row.variance ? format_double(*row.variance) : std::string());
    csv.rows.push_back(std::move(out));
  }
  write_csv_file(path, csv);
}

}  // namespace popstrat
