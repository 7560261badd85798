#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "popstrat/formula.hpp"

using namespace popstrat;

namespace {

CovariateSchema abc_schema() {
  CovariateSchema s;
  s.variables.push_back({"a", {"a0", "a1", "a2"}});
  s.variables.push_back({"b", {"b0", "b1"}});
  s.variables.push_back({"c", {"c0", "c1", "c2", "c3"}});
  return s;
}

}  // namespace

TEST_SUITE("formula") {

TEST_CASE("parsing terms, interactions, and psi constructs") {
  const CovariateSchema s = abc_schema();
  const ModelFormula f1 = parse_formula("a+b", s);
  REQUIRE(f1.terms.size() == 2);
  CHECK(f1.terms[0].vars == std::vector<std::size_t>{0});
  CHECK(f1.terms[1].vars == std::vector<std::size_t>{1});
  CHECK(!f1.psi_fixed);
  CHECK(!f1.psi_varying);

  // '*' expands to both mains plus the interaction; duplicates collapse
  const ModelFormula f2 = parse_formula("a*b + a + b", s);
  REQUIRE(f2.terms.size() == 3);
  CHECK(f2.terms[2].vars == std::vector<std::size_t>{0, 1});

  const ModelFormula f3 = parse_formula("a + psi + (1|psi)", s);
  CHECK(f3.psi_fixed);
  CHECK(f3.psi_varying);

  CHECK_THROWS_AS(parse_formula("a+zzz", s), data_error);
  CHECK_THROWS_AS(parse_formula("", s), data_error);
}

TEST_CASE("main_effects_formula covers every variable") {
  const CovariateSchema s = abc_schema();
  const ModelFormula f = main_effects_formula(s);
  REQUIRE(f.terms.size() == 3);
  for (std::size_t v = 0; v < 3; ++v) CHECK(f.terms[v].vars == std::vector<std::size_t>{v});
}

TEST_CASE("design column count follows the dummy-coding rule") {
  const CovariateSchema s = abc_schema();
  // 1 + (3-1) + (2-1) + (4-1) = 7
  CHECK(Design(s, parse_formula("a+b+c", s)).n_columns() == 7);
  // + (3-1)(2-1) = 9
  CHECK(Design(s, parse_formula("a*b+c", s)).n_columns() == 9);
  // saturated two-var: 1 + 2 + 1 + 2 = 6 == n_cells(a,b)
  CovariateSchema ab;
  ab.variables = {s.variables[0], s.variables[1]};
  CHECK(Design(ab, parse_formula("a*b", ab)).n_columns() == 6);
  CHECK(Design(s, parse_formula("a+psi", s)).has_psi_column());
}

TEST_CASE("design matrix equals a hand-built dummy oracle") {
  const CovariateSchema s = abc_schema();
  const Design d(s, parse_formula("a*b+c+psi", s));
  const auto cells = all_cells(s);
  std::vector<double> psi(cells.size());
  for (std::size_t j = 0; j < psi.size(); ++j) psi[j] = 0.01 * static_cast<double>(j + 1);
  const Eigen::MatrixXd X = d.matrix_for_cells(cells, &psi);
  REQUIRE(X.rows() == static_cast<Eigen::Index>(cells.size()));
  REQUIRE(X.cols() == static_cast<Eigen::Index>(d.n_columns()));

  const auto& names = d.column_names();
  for (std::size_t j = 0; j < cells.size(); ++j) {
    const int a = cells[j].levels[0];
    const int b = cells[j].levels[1];
    const int c = cells[j].levels[2];
    for (std::size_t k = 0; k < names.size(); ++k) {
      double want = -1.0;
      const std::string& nm = names[k];
      if (nm == "(Intercept)") {
        want = 1.0;
      } else if (nm == "psi") {
        want = psi[j];
      } else {
        // dummy products parsed from the column name, e.g. "a=a1:b=b1"
        want = 1.0;
        std::size_t pos = 0;
        while (pos < nm.size()) {
          const auto colon = nm.find(':', pos);
          const std::string piece = nm.substr(pos, colon == std::string::npos ? nm.size() - pos
                                                                              : colon - pos);
          const auto eq = piece.find('=');
          REQUIRE(eq != std::string::npos);
          const std::string var = piece.substr(0, eq);
          const std::string lev = piece.substr(eq + 1);
          const int have = var == "a" ? a : (var == "b" ? b : c);
          const auto idx = s.level_index(s.require_var(var), lev);
          REQUIRE(idx.has_value());
          if (have != *idx) want = 0.0;
          pos = colon == std::string::npos ? nm.size() : colon + 1;
        }
      }
      CHECK(X(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) == want);
    }
  }

  // reference levels never get a dummy
  for (const auto& nm : names) {
    CHECK(nm.find("=a0") == std::string::npos);
    CHECK(nm.find("=b0") == std::string::npos);
    CHECK(nm.find("=c0") == std::string::npos);
  }
}

TEST_CASE("psi required exactly when the formula has a fixed psi term") {
  const CovariateSchema s = abc_schema();
  const Design with_psi(s, parse_formula("a+psi", s));
  const Design without(s, parse_formula("a", s));
  const auto cells = all_cells(s);
  CHECK_THROWS_AS(with_psi.matrix_for_cells(cells, nullptr), data_error);
  CHECK_NOTHROW(without.matrix_for_cells(cells, nullptr));
}

}
