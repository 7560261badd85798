#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/microdata.hpp"

namespace popstrat {

// One fixed-effect term: a set of schema variable indices. Size 1 is a main
// effect, size k >= 2 a k-way interaction. Indices are kept sorted.
struct FixedTerm {
  std::vector<std::size_t> vars;

  bool operator==(const FixedTerm& o) const { return vars == o.vars; }
  bool operator<(const FixedTerm& o) const {
    if (vars.size() != o.vars.size()) return vars.size() < o.vars.size();
    return vars < o.vars;
  }
};

// Parsed model formula. Grammar: terms joined by '+'; a term is a variable
// name, a '*' product (expands to all mains and interactions), the literal
// 'psi' (numeric propensity covariate), or '(1|psi)' (varying intercept over
// propensity groups). The intercept is always implicit.
struct ModelFormula {
  std::vector<FixedTerm> terms;  // sorted, unique
  bool psi_fixed = false;
  bool psi_varying = false;
  std::string text;
};

ModelFormula parse_formula(std::string_view text, const CovariateSchema& schema);

// Dummy-coded fixed-effect design. Reference level of every variable is its
// first level; a main effect with L levels contributes L-1 columns and a
// k-way interaction the product of (L-1) factors. The optional psi column
// holds a numeric value supplied per row.
class Design {
 public:
  Design(const CovariateSchema& schema, const ModelFormula& formula);

  std::size_t n_columns() const { return names_.size(); }
  const std::vector<std::string>& column_names() const { return names_; }
  bool has_psi_column() const { return psi_column_.has_value(); }

  // psi is required iff the formula has a fixed psi term. The Ref accepts
  // strided rows of column-major matrices.
  void fill_row(const CellKey& key, std::optional<double> psi,
                Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> row) const;
  Eigen::MatrixXd matrix_for_cells(const std::vector<CellKey>& cells,
                                   const std::vector<double>* psi = nullptr) const;
  Eigen::MatrixXd matrix_for_units(const Microdata& data,
                                   const std::vector<double>* psi_by_unit = nullptr) const;

  const ModelFormula& formula() const { return formula_; }
  const CovariateSchema& schema() const { return schema_; }

 private:
  CovariateSchema schema_;
  ModelFormula formula_;
  std::vector<std::string> names_;
  // Per design column: the (variable, nonreference level) pairs whose
  // dummies multiply into the column. Empty for the intercept.
  struct Column {
    std::vector<std::pair<std::size_t, int>> factors;
    bool is_psi = false;
  };
  std::vector<Column> columns_;
  std::optional<std::size_t> psi_column_;
};

// Main-effects-only formula over every schema variable (for propensity
// models and as a building block elsewhere).
ModelFormula main_effects_formula(const CovariateSchema& schema);

}  // namespace popstrat
