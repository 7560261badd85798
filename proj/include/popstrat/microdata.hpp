#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/csv.hpp"

namespace popstrat {

// Unit-level data bound to a schema. Covariates are stored column-major as
// level indices. Outcome, weight and inclusion flag are optional columns;
// a missing outcome value inside an otherwise present column is NaN.
class Microdata {
 public:
  Microdata() = default;
  explicit Microdata(CovariateSchema schema);

  const CovariateSchema& schema() const { return schema_; }
  std::size_t size() const { return n_; }

  // Appends one unit; covariate values are level indices in schema order.
  void append(const std::vector<int>& levels, std::optional<double> outcome = std::nullopt,
              std::optional<double> weight = std::nullopt,
              std::optional<int> included = std::nullopt);

  int level(std::size_t var, std::size_t unit) const { return covariates_[var][unit]; }
  CellKey key_of(std::size_t unit) const;
  std::size_t rank_of(std::size_t unit) const;

  bool has_outcome_column() const { return has_outcome_; }
  bool outcome_observed(std::size_t unit) const;
  double outcome(std::size_t unit) const { return outcome_[unit]; }

  bool has_weight_column() const { return has_weight_; }
  double weight(std::size_t unit) const { return has_weight_ ? weight_[unit] : 1.0; }

  bool has_included_column() const { return has_included_; }
  int included(std::size_t unit) const { return included_[unit]; }

  std::vector<double> observed_outcomes() const;
  Microdata subset(const std::vector<int>& units) const;

  void validate() const;

  // CSV interchange. Columns named like schema variables hold level labels;
  // reserved columns: outcome, weight, included. Empty outcome fields are
  // missing values. If no schema is given, one is inferred with levels
  // sorted lexicographically per variable (row order never matters).
  static Microdata read_csv(const std::string& path,
                            const std::optional<CovariateSchema>& schema = std::nullopt);
  static Microdata from_csv_table(const CsvTable& table, std::string_view context,
                                  const std::optional<CovariateSchema>& schema);
  void write_csv(const std::string& path) const;

 private:
  CovariateSchema schema_;
  std::size_t n_ = 0;
  std::vector<std::vector<int>> covariates_;  // [var][unit]
  std::vector<double> outcome_;
  std::vector<double> weight_;
  std::vector<int> included_;
  bool has_outcome_ = false;
  bool has_weight_ = false;
  bool has_included_ = false;

  friend Microdata concat_for_inclusion(const Microdata& nonprob, const Microdata& reference);
};

// Stacks a nonprobability sample (included = 1) over a reference sample
// (included = 0) for propensity estimation. Schemas must match.
Microdata concat_for_inclusion(const Microdata& nonprob, const Microdata& reference);

// Infers a schema from label columns: variables in header order, levels
// sorted lexicographically.
CovariateSchema infer_schema(const std::vector<std::string>& var_names,
                             const std::vector<std::vector<std::string>>& label_columns);

}  // namespace popstrat
