#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "popstrat/csv.hpp"
#include "popstrat/microdata.hpp"

using namespace popstrat;

TEST_SUITE("microdata") {

TEST_CASE("csv ingestion with reserved columns") {
  const CsvTable t = parse_csv_text(
      "age,outcome,weight,sex\n"
      "old,2.5,3,m\n"
      "young,,1,f\n"
      "old,1.5,2,f\n",
      "micro");
  const Microdata d = Microdata::from_csv_table(t, "micro", std::nullopt);
  REQUIRE(d.size() == 3);
  // inferred schema: variables in header order (reserved columns skipped),
  // levels sorted lexicographically
  REQUIRE(d.schema().n_vars() == 2);
  CHECK(d.schema().variables[0].name == "age");
  CHECK(d.schema().variables[0].levels == std::vector<std::string>{"old", "young"});
  CHECK(d.schema().variables[1].name == "sex");
  CHECK(d.has_outcome_column());
  CHECK(d.has_weight_column());
  CHECK(!d.has_included_column());
  CHECK(d.outcome_observed(0));
  CHECK(!d.outcome_observed(1));
  CHECK(d.outcome(0) == 2.5);
  CHECK(d.weight(1) == 1.0);
  CHECK(d.level(0, 0) == 0);
  CHECK(d.level(0, 1) == 1);
}

TEST_CASE("unknown level against a fixed schema is rejected") {
  CovariateSchema s;
  s.variables.push_back({"age", {"young", "old"}});
  const CsvTable t = parse_csv_text("age\nancient\n", "micro");
  CHECK_THROWS_AS(Microdata::from_csv_table(t, "micro", s), data_error);
}

TEST_CASE("subset keeps per-unit columns aligned") {
  CovariateSchema s;
  s.variables.push_back({"g", {"a", "b"}});
  Microdata d(s);
  d.append({0}, 1.0, 10.0);
  d.append({1}, 2.0, 20.0);
  d.append({0}, 3.0, 30.0);
  const Microdata sub = d.subset({2, 0});
  REQUIRE(sub.size() == 2);
  CHECK(sub.outcome(0) == 3.0);
  CHECK(sub.weight(0) == 30.0);
  CHECK(sub.level(0, 0) == 0);
  CHECK(sub.outcome(1) == 1.0);
}

TEST_CASE("concat_for_inclusion stacks with inclusion flags") {
  CovariateSchema s;
  s.variables.push_back({"g", {"a", "b"}});
  Microdata np(s);
  np.append({0}, 5.0);
  np.append({1}, 6.0);
  Microdata ref(s);
  ref.append({1}, std::nullopt, 4.0);
  const Microdata stacked = concat_for_inclusion(np, ref);
  REQUIRE(stacked.size() == 3);
  REQUIRE(stacked.has_included_column());
  CHECK(stacked.included(0) == 1);
  CHECK(stacked.included(1) == 1);
  CHECK(stacked.included(2) == 0);
  CHECK(stacked.weight(2) == 4.0);
  CHECK(stacked.level(0, 2) == 1);
}

TEST_CASE("default weight is one without a weight column") {
  CovariateSchema s;
  s.variables.push_back({"g", {"a"}});
  Microdata d(s);
  d.append({0});
  CHECK(d.weight(0) == 1.0);
}

}
