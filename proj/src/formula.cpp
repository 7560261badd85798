#include "popstrat/formula.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

namespace popstrat {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

ModelFormula parse_formula(std::string_view text, const CovariateSchema& schema) {
  ModelFormula formula;
  formula.text = trim(text);
  if (formula.text.empty()) throw data_error("empty model formula");

  std::set<FixedTerm> terms;
  for (const auto& raw : split_on(formula.text, '+')) {
    if (raw.empty()) throw data_error("formula has an empty term: '" + formula.text + "'");
    if (raw == "(1|psi)") {
      formula.psi_varying = true;
      continue;
    }
    if (raw == "psi") {
      formula.psi_fixed = true;
      continue;
    }
    if (raw.find('(') != std::string::npos || raw.find('|') != std::string::npos) {
      throw data_error("unsupported formula term '" + raw + "' (only '(1|psi)' is allowed in parentheses)");
    }
    std::vector<std::size_t> vars;
    for (const auto& part : split_on(raw, '*')) {
      if (part == "psi") throw data_error("'psi' cannot appear inside a '*' product");
      const auto v = schema.var_index(part);
      if (!v) throw data_error("unknown variable in formula: '" + part + "'");
      vars.push_back(*v);
    }
    std::sort(vars.begin(), vars.end());
    vars.erase(std::unique(vars.begin(), vars.end()), vars.end());
    // a*b*... expands to every nonempty subset of the product's variables.
    const auto k = vars.size();
    for (std::size_t mask = 1; mask < (std::size_t{1} << k); ++mask) {
      FixedTerm term;
      for (std::size_t i = 0; i < k; ++i) {
        if (mask & (std::size_t{1} << i)) term.vars.push_back(vars[i]);
      }
      terms.insert(std::move(term));
    }
  }
  formula.terms.assign(terms.begin(), terms.end());
  if (formula.terms.empty() && !formula.psi_fixed && !formula.psi_varying) {
    throw data_error("formula has no terms: '" + formula.text + "'");
  }
  return formula;
}

ModelFormula main_effects_formula(const CovariateSchema& schema) {
  ModelFormula formula;
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    formula.terms.push_back(FixedTerm{{v}});
    if (v) formula.text += "+";
    formula.text += schema.variables[v].name;
  }
  return formula;
}

Design::Design(const CovariateSchema& schema, const ModelFormula& formula)
    : schema_(schema), formula_(formula) {
  schema_.validate();
  names_.push_back("(Intercept)");
  columns_.push_back({});
  for (const auto& term : formula_.terms) {
    // A variable with a single level contributes no dummy columns, so the
    // whole term drops out.
    bool degenerate = false;
    for (auto v : term.vars) degenerate = degenerate || schema_.variables[v].levels.size() < 2;
    if (degenerate) continue;
    // Odometer over nonreference levels of every variable in the term.
    std::vector<int> idx(term.vars.size(), 1);
    bool more = true;
    while (more) {
      Column col;
      std::string name;
      for (std::size_t i = 0; i < term.vars.size(); ++i) {
        const auto v = term.vars[i];
        col.factors.emplace_back(v, idx[i]);
        if (i) name.push_back(':');
        name += schema_.variables[v].name + "=" +
                schema_.variables[v].levels[static_cast<std::size_t>(idx[i])];
      }
      names_.push_back(std::move(name));
      columns_.push_back(std::move(col));
      more = false;
      for (std::size_t pos = term.vars.size(); pos-- > 0;) {
        const auto n_levels = schema_.variables[term.vars[pos]].levels.size();
        if (static_cast<std::size_t>(++idx[pos]) < n_levels) {
          more = true;
          break;
        }
        idx[pos] = 1;
      }
    }
  }
  if (formula_.psi_fixed) {
    psi_column_ = names_.size();
    names_.push_back("psi");
    Column col;
    col.is_psi = true;
    columns_.push_back(std::move(col));
  }
}

void Design::fill_row(const CellKey& key, std::optional<double> psi,
                      Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> row) const {
  if (static_cast<std::size_t>(row.cols()) != n_columns()) {
    throw data_error("design row has wrong width");
  }
  if (psi_column_ && !psi) throw data_error("formula needs a psi value but none was supplied");
  for (std::size_t c = 0; c < columns_.size(); ++c) {
    const auto& col = columns_[c];
    if (col.is_psi) {
      row[static_cast<Eigen::Index>(c)] = *psi;
      continue;
    }
    double v = 1.0;
    for (const auto& [var, level] : col.factors) {
      if (key.levels[var] != level) {
        v = 0.0;
        break;
      }
    }
    row[static_cast<Eigen::Index>(c)] = v;
  }
}

Eigen::MatrixXd Design::matrix_for_cells(const std::vector<CellKey>& cells,
                                         const std::vector<double>* psi) const {
  if (psi_column_ && (!psi || psi->size() != cells.size())) {
    throw data_error("matrix_for_cells: psi values required per cell");
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(n_columns()));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    fill_row(cells[i], psi ? std::optional<double>((*psi)[i]) : std::nullopt,
             X.row(static_cast<Eigen::Index>(i)));
  }
  return X;
}

Eigen::MatrixXd Design::matrix_for_units(const Microdata& data,
                                         const std::vector<double>* psi_by_unit) const {
  if (!(data.schema() == schema_)) throw data_error("matrix_for_units: schema mismatch");
  if (psi_column_ && (!psi_by_unit || psi_by_unit->size() != data.size())) {
    throw data_error("matrix_for_units: psi values required per unit");
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(n_columns()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    fill_row(data.key_of(i), psi_by_unit ? std::optional<double>((*psi_by_unit)[i]) : std::nullopt,
             X.row(static_cast<Eigen::Index>(i)));
  }
  return X;
}

}  // namespace popstrat
