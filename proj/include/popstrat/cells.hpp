#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/common.hpp"

namespace popstrat {

// Ordered categorical covariates. Variable order and level order are part of
// the schema identity: cell keys are level-index tuples in variable order.
struct CovariateSchema {
  struct Variable {
    std::string name;
    std::vector<std::string> levels;
  };

  std::vector<Variable> variables;

  void validate() const;

  std::size_t n_vars() const { return variables.size(); }
  std::size_t n_cells() const;

  std::optional<std::size_t> var_index(std::string_view name) const;
  std::size_t require_var(std::string_view name) const;
  std::optional<int> level_index(std::size_t var, std::string_view label) const;

  bool operator==(const CovariateSchema& other) const;
};

// A cell is one combination of levels, stored as level indices in schema
// variable order.
struct CellKey {
  std::vector<int> levels;

  bool operator==(const CellKey& other) const { return levels == other.levels; }
  bool operator<(const CellKey& other) const { return levels < other.levels; }
};

// Mixed-radix rank of a key: position in the odometer enumeration of all
// cells (last variable fastest). Gives cells a canonical total order.
std::size_t cell_rank(const CovariateSchema& schema, const CellKey& key);
CellKey cell_from_rank(const CovariateSchema& schema, std::size_t rank);
std::vector<CellKey> all_cells(const CovariateSchema& schema);
std::string cell_label(const CovariateSchema& schema, const CellKey& key);

enum class CellRole { sample, reference, population };

std::string_view to_string(CellRole role);

// Per-cell aggregate. count covers every unit mapped to the cell; mean and
// variance summarize the outcome over units where it is observed (mean needs
// one such unit, variance two). Population and reference tables usually carry
// counts only.
struct CellRow {
  CellKey key;
  double count = 0.0;
  std::optional<double> mean;
  std::optional<double> variance;
};

class Microdata;  // defined in microdata.hpp

// Aggregated cell data, rows unique and sorted by cell rank.
struct CellTable {
  CovariateSchema schema;
  CellRole role = CellRole::sample;
  std::vector<CellRow> rows;

  double total_count() const;
  const CellRow* find(const CellKey& key) const;
  void validate() const;  // sortedness, uniqueness, nonnegative counts
};

// Builds a table from unit-level data: one row per key observed in the data,
// counts over all units, outcome moments over outcome-observed units.
CellTable build_cell_table(const Microdata& data, CellRole role);

// Weighted variant: counts are sums of unit weights, moments are weighted.
CellTable build_cell_table_weighted(const Microdata& data, CellRole role);

// Set algebra between two tables over one schema, keyed by cell.
// `a` plays the sample side, `b` the population side.
struct CellAlignment {
  std::vector<CellKey> shared;
  std::vector<CellKey> sample_only;      // in a, not in b
  std::vector<CellKey> population_only;  // in b, not in a
};

CellAlignment align_cells(const CellTable& a, const CellTable& b);

// Cell-table CSV interchange: one column per schema variable (level labels),
// then count and optional mean / variance columns.
CellTable read_cell_table_csv(const std::string& path, CellRole role,
                              const std::optional<CovariateSchema>& schema = std::nullopt);
void write_cell_table_csv(const std::string& path, const CellTable& table);

}  // namespace popstrat
