#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/csv.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

using namespace popstrat;

namespace {

CovariateSchema two_var_schema() {
  CovariateSchema s;
  s.variables.push_back({"age", {"young", "mid", "old"}});
  s.variables.push_back({"sex", {"m", "f"}});
  return s;
}

}  // namespace

TEST_SUITE("cells") {

TEST_CASE("schema validation and lookups") {
  CovariateSchema s = two_var_schema();
  s.validate();
  CHECK(s.n_vars() == 2);
  CHECK(s.n_cells() == 6);
  CHECK(*s.var_index("sex") == 1);
  CHECK(!s.var_index("zip").has_value());
  CHECK(*s.level_index(0, "old") == 2);
  CHECK(!s.level_index(0, "ancient").has_value());

  CovariateSchema dup = s;
  dup.variables.push_back({"age", {"x"}});
  CHECK_THROWS_AS(dup.validate(), data_error);
  CovariateSchema empty_levels = s;
  empty_levels.variables[0].levels.clear();
  CHECK_THROWS_AS(empty_levels.validate(), data_error);
}

TEST_CASE("cell rank round trip covers the odometer order") {
  const CovariateSchema s = two_var_schema();
  const auto cells = all_cells(s);
  REQUIRE(cells.size() == 6);
  for (std::size_t r = 0; r < cells.size(); ++r) {
    CHECK(cell_rank(s, cells[r]) == r);
    CHECK(cell_from_rank(s, r) == cells[r]);
  }
  // last variable fastest
  CHECK(cells[0].levels == std::vector<int>{0, 0});
  CHECK(cells[1].levels == std::vector<int>{0, 1});
  CHECK(cells[2].levels == std::vector<int>{1, 0});
  CHECK(cell_label(s, cells[3]) == "age=mid:sex=f");
}

TEST_CASE("build_cell_table matches a brute-force group-by") {
  const CovariateSchema s = two_var_schema();
  Rng rng(11);
  Microdata data(s);
  std::map<std::vector<int>, std::vector<double>> by_cell;
  std::map<std::vector<int>, int> counts;
  for (int i = 0; i < 500; ++i) {
    const int a = static_cast<int>(rng.uniform_index(3));
    const int b = static_cast<int>(rng.uniform_index(2));
    const bool with_outcome = rng.uniform() < 0.8;
    const double y = rng.normal(2.0, 3.0);
    data.append({a, b}, with_outcome ? std::optional<double>(y) : std::nullopt);
    ++counts[{a, b}];
    if (with_outcome) by_cell[{a, b}].push_back(y);
  }
  const CellTable t = build_cell_table(data, CellRole::sample);
  t.validate();
  REQUIRE(t.rows.size() == counts.size());
  for (const auto& row : t.rows) {
    const auto key = row.key.levels;
    CHECK(row.count == counts[key]);
    const auto& ys = by_cell[key];
    if (ys.empty()) {
      CHECK(!row.mean.has_value());
      continue;
    }
    double m = 0.0;
    for (double y : ys) m += y;
    m /= static_cast<double>(ys.size());
    REQUIRE(row.mean.has_value());
    CHECK(*row.mean == doctest::Approx(m).epsilon(1e-12));
    if (ys.size() >= 2) {
      double ss = 0.0;
      for (double y : ys) ss += (y - m) * (y - m);
      REQUIRE(row.variance.has_value());
      CHECK(*row.variance == doctest::Approx(ss / (static_cast<double>(ys.size()) - 1.0))
                                 .epsilon(1e-10));
    }
  }
}

TEST_CASE("weighted build matches a weighted oracle") {
  const CovariateSchema s = two_var_schema();
  Rng rng(12);
  Microdata data(s);
  std::map<std::vector<int>, double> wsum;
  std::map<std::vector<int>, double> wy;
  for (int i = 0; i < 300; ++i) {
    const int a = static_cast<int>(rng.uniform_index(3));
    const int b = static_cast<int>(rng.uniform_index(2));
    const double w = 0.5 + rng.uniform() * 4.0;
    const double y = rng.normal();
    data.append({a, b}, y, w);
    wsum[{a, b}] += w;
    wy[{a, b}] += w * y;
  }
  const CellTable t = build_cell_table_weighted(data, CellRole::reference);
  for (const auto& row : t.rows) {
    CHECK(row.count == doctest::Approx(wsum[row.key.levels]).epsilon(1e-12));
    REQUIRE(row.mean.has_value());
    CHECK(*row.mean ==
          doctest::Approx(wy[row.key.levels] / wsum[row.key.levels]).epsilon(1e-10));
  }
}

TEST_CASE("align_cells equals set algebra") {
  const CovariateSchema s = two_var_schema();
  Rng rng(13);
  const auto cells = all_cells(s);
  for (int trial = 0; trial < 50; ++trial) {
    CellTable a;
    a.schema = s;
    CellTable b;
    b.schema = s;
    b.role = CellRole::population;
    std::set<std::size_t> in_a;
    std::set<std::size_t> in_b;
    for (std::size_t r = 0; r < cells.size(); ++r) {
      if (rng.uniform() < 0.5) in_a.insert(r);
      if (rng.uniform() < 0.5) in_b.insert(r);
    }
    for (auto r : in_a) a.rows.push_back({cells[r], 1.0, std::nullopt, std::nullopt});
    for (auto r : in_b) b.rows.push_back({cells[r], 1.0, std::nullopt, std::nullopt});
    const CellAlignment al = align_cells(a, b);
    std::set<std::size_t> shared;
    std::set<std::size_t> only_a;
    std::set<std::size_t> only_b;
    for (auto r : in_a) (in_b.count(r) ? shared : only_a).insert(r);
    for (auto r : in_b) {
      if (!in_a.count(r)) only_b.insert(r);
    }
    REQUIRE(al.shared.size() == shared.size());
    REQUIRE(al.sample_only.size() == only_a.size());
    REQUIRE(al.population_only.size() == only_b.size());
    for (const auto& k : al.shared) CHECK(shared.count(cell_rank(s, k)));
    for (const auto& k : al.sample_only) CHECK(only_a.count(cell_rank(s, k)));
    for (const auto& k : al.population_only) CHECK(only_b.count(cell_rank(s, k)));
  }
}

TEST_CASE("cell table csv round trip") {
  const CovariateSchema s = two_var_schema();
  CellTable t;
  t.schema = s;
  t.role = CellRole::population;
  t.rows.push_back({CellKey{{0, 1}}, 120.0, 2.25, std::nullopt});
  t.rows.push_back({CellKey{{2, 0}}, 40.5, std::nullopt, std::nullopt});
  const auto dir = std::filesystem::temp_directory_path() / "popstrat_cells_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "cells.csv").string();
  write_cell_table_csv(path, t);
  const CellTable back = read_cell_table_csv(path, CellRole::population, s);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0].key == t.rows[0].key);
  CHECK(back.rows[0].count == 120.0);
  REQUIRE(back.rows[0].mean.has_value());
  CHECK(*back.rows[0].mean == 2.25);
  CHECK(!back.rows[1].mean.has_value());

  // schema inference from the file alone keeps counts
  const CellTable inferred = read_cell_table_csv(path, CellRole::population);
  CHECK(inferred.total_count() == doctest::Approx(160.5));
  std::filesystem::remove_all(dir);
}

TEST_CASE("cell table validation rejects disorder") {
  const CovariateSchema s = two_var_schema();
  CellTable t;
  t.schema = s;
  t.rows.push_back({CellKey{{1, 0}}, 1.0, std::nullopt, std::nullopt});
  t.rows.push_back({CellKey{{0, 0}}, 1.0, std::nullopt, std::nullopt});
  CHECK_THROWS_AS(t.validate(), data_error);
  t.rows.erase(t.rows.begin());
  t.rows.push_back({CellKey{{0, 0}}, 1.0, std::nullopt, std::nullopt});
  CHECK_THROWS_AS(t.validate(), data_error);  // duplicate
  CellTable neg;
  neg.schema = s;
  neg.rows.push_back({CellKey{{0, 0}}, -2.0, std::nullopt, std::nullopt});
  CHECK_THROWS_AS(neg.validate(), data_error);
}

}
