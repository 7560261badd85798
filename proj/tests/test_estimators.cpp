#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/design_estimators.hpp"
#include "popstrat/estimates.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

using namespace popstrat;

namespace {

CovariateSchema gh_schema() {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1", "g2"}});
  s.variables.push_back({"h", {"h0", "h1"}});
  return s;
}

Microdata random_sample(const CovariateSchema& s, int n, Rng& rng) {
  Microdata d(s);
  for (int i = 0; i < n; ++i) {
    std::vector<int> key;
    for (const auto& v : s.variables) {
      key.push_back(static_cast<int>(rng.uniform_index(v.levels.size())));
    }
    const double y = 1.0 + 2.0 * key[0] - 1.5 * key[1] + rng.normal();
    d.append(key, y);
  }
  return d;
}

CellTable population_over(const CovariateSchema& s, const std::vector<double>& counts) {
  CellTable t;
  t.schema = s;
  t.role = CellRole::population;
  const auto cells = all_cells(s);
  REQUIRE(cells.size() == counts.size());
  for (std::size_t j = 0; j < cells.size(); ++j) {
    if (counts[j] > 0) t.rows.push_back({cells[j], counts[j], std::nullopt, std::nullopt});
  }
  return t;
}

}  // namespace

TEST_SUITE("estimators") {

TEST_CASE("unweighted mean equals the per-group sample mean") {
  const CovariateSchema s = gh_schema();
  Rng rng(21);
  const Microdata d = random_sample(s, 400, rng);
  const CellTable cells = build_cell_table(d, CellRole::sample);
  const Grouping grouping = Grouping::overall_and_levels(s, "g");
  const auto est = unweighted_mean(cells, grouping);

  std::map<std::string, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < d.size(); ++i) {
    acc["overall"].first += d.outcome(i);
    acc["overall"].second += 1;
    const std::string g = "g=" + s.variables[0].levels[static_cast<std::size_t>(d.level(0, i))];
    acc[g].first += d.outcome(i);
    acc[g].second += 1;
  }
  for (const auto& e : est) {
    CHECK(e.method == "UnW");
    const auto& [sum, n] = acc.at(e.group);
    CHECK(e.estimate == doctest::Approx(sum / n).epsilon(1e-12));
  }
}

TEST_CASE("poststratified mean equals the population-weighted cell mean oracle") {
  const CovariateSchema s = gh_schema();
  Rng rng(22);
  const Microdata d = random_sample(s, 600, rng);
  const CellTable cells = build_cell_table(d, CellRole::sample);
  const CellTable pop = population_over(s, {100, 200, 300, 150, 100, 150});
  const auto est = poststratified_mean(cells, pop, Grouping::overall());

  double num = 0.0;
  double den = 0.0;
  for (const auto& prow : pop.rows) {
    const CellRow* srow = cells.find(prow.key);
    if (!srow || !srow->mean) continue;
    num += prow.count * *srow->mean;
    den += prow.count;
  }
  REQUIRE(est.size() == 1);
  CHECK(est[0].estimate == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("PS equals UnW under proportional allocation") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1"}});
  Microdata d(s);
  // n_j/n = 2/5, 3/5 exactly
  for (int i = 0; i < 2; ++i) d.append({0}, 1.0 + i);
  for (int i = 0; i < 3; ++i) d.append({1}, 4.0 + i);
  const CellTable cells = build_cell_table(d, CellRole::sample);
  const CellTable pop = population_over(s, {200, 300});
  const auto ps = poststratified_mean(cells, pop, Grouping::overall());
  const auto unw = unweighted_mean(cells, Grouping::overall());
  CHECK(std::abs(ps[0].estimate - unw[0].estimate) < 1e-12);
}

TEST_CASE("PS is invariant to scaling the population counts") {
  const CovariateSchema s = gh_schema();
  Rng rng(23);
  const Microdata d = random_sample(s, 300, rng);
  const CellTable cells = build_cell_table(d, CellRole::sample);
  const std::vector<double> counts = {100, 200, 300, 150, 100, 150};
  std::vector<double> scaled = counts;
  for (auto& c : scaled) c *= 7.25;
  const auto a = poststratified_mean(cells, population_over(s, counts), Grouping::overall());
  const auto b = poststratified_mean(cells, population_over(s, scaled), Grouping::overall());
  CHECK(std::abs(a[0].estimate - b[0].estimate) < 1e-12);
}

TEST_CASE("PS reports uncovered population mass") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1", "g2"}});
  Microdata d(s);
  d.append({0}, 1.0);
  d.append({1}, 2.0);
  const CellTable cells = build_cell_table(d, CellRole::sample);
  const CellTable pop = population_over(s, {100, 100, 200});
  std::vector<double> uncovered;
  const auto est = poststratified_mean(cells, pop, Grouping::overall(), &uncovered);
  REQUIRE(uncovered.size() == 1);
  CHECK(uncovered[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(est[0].estimate == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("saturated logistic recovers cell inclusion fractions") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1"}});
  Microdata np(s);
  Microdata ref(s);
  // cell g0: 30 included of 100 total; cell g1: 60 of 80
  for (int i = 0; i < 30; ++i) np.append({0});
  for (int i = 0; i < 60; ++i) np.append({1});
  for (int i = 0; i < 70; ++i) ref.append({0}, std::nullopt, 1.0);
  for (int i = 0; i < 20; ++i) ref.append({1}, std::nullopt, 1.0);
  const Microdata stacked = concat_for_inclusion(np, ref);
  const PropensityFit fit = fit_inclusion_model(stacked, main_effects_formula(s));
  CHECK(fit.converged);
  for (std::size_t i = 0; i < stacked.size(); ++i) {
    const double want = stacked.level(0, i) == 0 ? 0.3 : 0.75;
    CHECK(fit.fitted[i] == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("separation raises a numeric error") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1"}});
  Microdata np(s);
  Microdata ref(s);
  for (int i = 0; i < 40; ++i) np.append({0});
  for (int i = 0; i < 40; ++i) ref.append({1}, std::nullopt, 1.0);
  const Microdata stacked = concat_for_inclusion(np, ref);
  CHECK_THROWS_AS(fit_inclusion_model(stacked, main_effects_formula(s)), numeric_error);
}

TEST_CASE("ipw mean is the Hajek estimator under inverse propensities") {
  const CovariateSchema s = gh_schema();
  Rng rng(24);
  const Microdata d = random_sample(s, 200, rng);
  std::vector<double> props(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) props[i] = 0.05 + 0.9 * rng.uniform();
  const auto est = ipw_mean(d, props, Grouping::overall(), std::nullopt);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    num += d.outcome(i) / props[i];
    den += 1.0 / props[i];
  }
  REQUIRE(est.size() == 1);
  CHECK(est[0].method == "IPW");
  CHECK(est[0].estimate == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("weight trimming winsorizes at the requested quantile") {
  const CovariateSchema s = gh_schema();
  Rng rng(25);
  const Microdata d = random_sample(s, 150, rng);
  std::vector<double> props(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) props[i] = 0.02 + 0.9 * rng.uniform();

  WeightVector untrimmed;
  ipw_mean(d, props, Grouping::overall(), std::nullopt, &untrimmed);
  CHECK(untrimmed.trimmed == 0);

  WeightVector trimmed;
  ipw_mean(d, props, Grouping::overall(), 0.9, &trimmed);
  // type-7 quantile of the untrimmed weights as the cap
  std::vector<double> w = untrimmed.values;
  std::sort(w.begin(), w.end());
  const double h = 0.9 * (static_cast<double>(w.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const double cap = w[lo] + (h - std::floor(h)) * (w[lo + 1] - w[lo]);
  CHECK(trimmed.trim_cap == doctest::Approx(cap).epsilon(1e-12));
  int above = 0;
  for (std::size_t i = 0; i < trimmed.values.size(); ++i) {
    CHECK(trimmed.values[i] <= cap + 1e-12);
    if (untrimmed.values[i] > cap) {
      ++above;
      CHECK(trimmed.values[i] == doctest::Approx(cap).epsilon(1e-12));
    }
  }
  CHECK(trimmed.trimmed == above);
  CHECK(above > 0);
}

TEST_CASE("raking hits a closed-form 2x2 fixed point") {
  const CovariateSchema s = [] {
    CovariateSchema x;
    x.variables.push_back({"r", {"r0", "r1"}});
    x.variables.push_back({"c", {"c0", "c1"}});
    return x;
  }();
  Microdata d(s);
  d.append({0, 0}, 1.0);
  d.append({0, 1}, 2.0);
  d.append({1, 0}, 3.0);
  d.append({1, 1}, 4.0);
  WeightVector base;
  base.values = {1.0, 1.0, 1.0, 1.0};
  const std::vector<RakingMargin> margins = {{"r", {3.0, 1.0}}, {"c", {2.0, 2.0}}};
  const WeightVector w = rake_weights(d, base, margins);
  // column margins already balanced after the row pass: w = (1.5, 1.5, .5, .5)
  CHECK(w.values[0] == doctest::Approx(1.5).epsilon(1e-10));
  CHECK(w.values[1] == doctest::Approx(1.5).epsilon(1e-10));
  CHECK(w.values[2] == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(w.values[3] == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("raked weights match every margin and preserve base odds ratios") {
  const CovariateSchema s = [] {
    CovariateSchema x;
    x.variables.push_back({"r", {"r0", "r1"}});
    x.variables.push_back({"c", {"c0", "c1"}});
    return x;
  }();
  Rng rng(26);
  Microdata d(s);
  std::vector<double> base_w;
  for (int i = 0; i < 80; ++i) {
    const int r = static_cast<int>(rng.uniform_index(2));
    const int c = static_cast<int>(rng.uniform_index(2));
    d.append({r, c}, rng.normal());
    base_w.push_back(0.5 + rng.uniform());
  }
  WeightVector base;
  base.values = base_w;
  const std::vector<RakingMargin> margins = {{"r", {120.0, 60.0}}, {"c", {100.0, 80.0}}};
  const WeightVector w = rake_weights(d, base, margins);

  double cell_w[2][2] = {{0, 0}, {0, 0}};
  double cell_b[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < d.size(); ++i) {
    cell_w[d.level(0, i)][d.level(1, i)] += w.values[i];
    cell_b[d.level(0, i)][d.level(1, i)] += base.values[i];
  }
  CHECK(cell_w[0][0] + cell_w[0][1] == doctest::Approx(120.0).epsilon(1e-8));
  CHECK(cell_w[1][0] + cell_w[1][1] == doctest::Approx(60.0).epsilon(1e-8));
  CHECK(cell_w[0][0] + cell_w[1][0] == doctest::Approx(100.0).epsilon(1e-8));
  // IPF multiplies base weights by row and column factors only, so the
  // cross-cell odds ratio of the base table survives
  const double odds_w = (cell_w[0][0] * cell_w[1][1]) / (cell_w[0][1] * cell_w[1][0]);
  const double odds_b = (cell_b[0][0] * cell_b[1][1]) / (cell_b[0][1] * cell_b[1][0]);
  CHECK(odds_w == doctest::Approx(odds_b).epsilon(1e-7));
  // per-unit weights inside one cell stay proportional to base
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double factor = w.values[i] / base.values[i];
    const double cell_factor =
        cell_w[d.level(0, i)][d.level(1, i)] / cell_b[d.level(0, i)][d.level(1, i)];
    CHECK(factor == doctest::Approx(cell_factor).epsilon(1e-9));
  }
}

TEST_CASE("raking a single margin equals poststratification to it") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1", "g2"}});
  Rng rng(27);
  Microdata d(s);
  for (int i = 0; i < 90; ++i) {
    const int g = static_cast<int>(rng.uniform_index(3));
    d.append({g}, 0.5 * g + rng.normal());
  }
  WeightVector base;
  base.values.assign(d.size(), 1.0);
  const std::vector<RakingMargin> margins = {{"g", {500.0, 300.0, 200.0}}};
  const auto raked = weighted_mean(d, rake_weights(d, base, margins), Grouping::overall(), "Raking");
  const auto ps = poststratified_mean(build_cell_table(d, CellRole::sample),
                                      population_over(s, {500, 300, 200}), Grouping::overall());
  CHECK(raked[0].estimate == doctest::Approx(ps[0].estimate).epsilon(1e-12));
}

TEST_CASE("greg weights reproduce the calibration identity and matrix oracle") {
  const CovariateSchema s = gh_schema();
  Rng rng(28);
  const Microdata d = random_sample(s, 120, rng);
  const Design design(s, main_effects_formula(s));
  const CellTable pop = population_over(s, {100, 200, 300, 150, 100, 150});
  const Eigen::VectorXd totals = design_totals(design, pop);
  WeightVector base;
  base.values.assign(d.size(), pop.total_count() / static_cast<double>(d.size()));
  const WeightVector w = greg_weights(d, design, totals, base);

  const Eigen::MatrixXd X = design.matrix_for_units(d);
  Eigen::VectorXd calibrated = Eigen::VectorXd::Zero(X.cols());
  for (std::size_t i = 0; i < d.size(); ++i) {
    calibrated += w.values[i] * X.row(static_cast<Eigen::Index>(i)).transpose();
  }
  for (Eigen::Index k = 0; k < totals.size(); ++k) {
    CHECK(calibrated[k] == doctest::Approx(totals[k]).epsilon(1e-8));
  }

  // direct matrix form: w_i = b_i (1 + (t - X'b)' (X' diag(b) X)^{-1} x_i)
  Eigen::VectorXd b(static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) b[static_cast<Eigen::Index>(i)] = base.values[i];
  const Eigen::MatrixXd M = X.transpose() * b.asDiagonal() * X;
  const Eigen::VectorXd gap = totals - X.transpose() * b;
  const Eigen::VectorXd lambda = M.ldlt().solve(gap);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double want =
        base.values[i] * (1.0 + X.row(static_cast<Eigen::Index>(i)).dot(lambda));
    CHECK(w.values[i] == doctest::Approx(want).epsilon(1e-7));
  }
}

TEST_CASE("saturated GREG equals PS") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1", "g2"}});
  Rng rng(29);
  Microdata d(s);
  for (int i = 0; i < 100; ++i) {
    const int g = static_cast<int>(rng.uniform_index(3));
    d.append({g}, 1.0 + g + rng.normal());
  }
  const Design design(s, main_effects_formula(s));  // saturated for one variable
  const CellTable pop = population_over(s, {400, 350, 250});
  WeightVector base;
  base.values.assign(d.size(), pop.total_count() / static_cast<double>(d.size()));
  const auto greg =
      greg_mean(d, design, design_totals(design, pop), base, Grouping::overall());
  const auto ps = poststratified_mean(build_cell_table(d, CellRole::sample), pop,
                                      Grouping::overall());
  CHECK(std::abs(greg[0].estimate - ps[0].estimate) < 1e-10);
}

TEST_CASE("weighted estimators are scale-invariant in the weights") {
  const CovariateSchema s = gh_schema();
  Rng rng(30);
  const Microdata d = random_sample(s, 80, rng);
  WeightVector w;
  for (std::size_t i = 0; i < d.size(); ++i) w.values.push_back(0.5 + rng.uniform() * 3.0);
  WeightVector scaled = w;
  for (auto& v : scaled.values) v *= 123.456;
  const auto a = weighted_mean(d, w, Grouping::overall_and_levels(s, "g"), "W");
  const auto b = weighted_mean(d, scaled, Grouping::overall_and_levels(s, "g"), "W");
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(std::abs(a[k].estimate - b[k].estimate) < 1e-12);
  }
}

TEST_CASE("doubly robust: true propensities carry a wrong outcome model") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1"}});
  s.variables.push_back({"h", {"h0", "h1"}});
  const std::vector<double> N = {300, 200, 250, 250};
  const std::vector<double> psi = {0.12, 0.35, 0.22, 0.40};
  const std::vector<double> mu = {1.0, 3.0, 2.0, 7.0};  // interaction: mains are wrong
  const CellTable pop = population_over(s, N);
  double truth = 0.0;
  for (std::size_t j = 0; j < 4; ++j) truth += N[j] * mu[j];
  truth /= 1000.0;

  // outcome model: intercept only (badly wrong)
  ModelFormula empty;
  empty.text = "1";
  const Design design(s, empty);
  const auto cells = all_cells(s);

  Rng rng(31);
  double sum = 0.0;
  double sumsq = 0.0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r) {
    Microdata d(s);
    std::vector<double> props;
    for (std::size_t j = 0; j < 4; ++j) {
      const long long n_j = rng.binomial(static_cast<long long>(N[j]), psi[j]);
      for (long long i = 0; i < n_j; ++i) {
        d.append(cells[j].levels, mu[j] + 0.5 * rng.normal());
        props.push_back(psi[j]);
      }
    }
    const auto est = dr_mean(d, design, pop, props, std::nullopt, Grouping::overall());
    sum += est[0].estimate;
    sumsq += est[0].estimate * est[0].estimate;
  }
  const double mean = sum / reps;
  const double mc_se = std::sqrt((sumsq / reps - mean * mean) / reps);
  CHECK(std::abs(mean - truth) < 4.0 * mc_se + 1e-6);
}

TEST_CASE("doubly robust: saturated outcome model carries wrong propensities") {
  CovariateSchema s;
  s.variables.push_back({"g", {"g0", "g1"}});
  s.variables.push_back({"h", {"h0", "h1"}});
  const std::vector<double> N = {300, 200, 250, 250};
  const std::vector<double> psi = {0.12, 0.35, 0.22, 0.40};
  const std::vector<double> mu = {1.0, 3.0, 2.0, 7.0};
  const CellTable pop = population_over(s, N);
  double truth = 0.0;
  for (std::size_t j = 0; j < 4; ++j) truth += N[j] * mu[j];
  truth /= 1000.0;

  const Design design(s, parse_formula("g*h", s));  // saturated
  const auto cells = all_cells(s);

  Rng rng(32);
  double sum = 0.0;
  double sumsq = 0.0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r) {
    Microdata d(s);
    std::vector<double> props;
    for (std::size_t j = 0; j < 4; ++j) {
      const long long n_j = rng.binomial(static_cast<long long>(N[j]), psi[j]);
      for (long long i = 0; i < n_j; ++i) {
        d.append(cells[j].levels, mu[j] + 0.5 * rng.normal());
        props.push_back(0.2 + 0.1 * (j % 2));  // wrong on purpose
      }
    }
    const auto est = dr_mean(d, design, pop, props, std::nullopt, Grouping::overall());
    sum += est[0].estimate;
    sumsq += est[0].estimate * est[0].estimate;
  }
  const double mean = sum / reps;
  const double mc_se = std::sqrt((sumsq / reps - mean * mean) / reps);
  CHECK(std::abs(mean - truth) < 4.0 * mc_se + 1e-6);
}

TEST_CASE("delete-one jackknife of the mean recovers s over sqrt n") {
  Rng rng(33);
  const int n = 40;
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal(5.0, 2.0);
  const auto est = [&](const std::vector<int>& keep) {
    double sum = 0.0;
    for (int i : keep) sum += x[static_cast<std::size_t>(i)];
    return sum / static_cast<double>(keep.size());
  };
  const double se = jackknife_se_scalar(n, n, 901, est);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double s2 = 0.0;
  for (double v : x) s2 += (v - mean) * (v - mean);
  s2 /= (n - 1);
  CHECK(se == doctest::Approx(std::sqrt(s2 / n)).epsilon(1e-10));
}

TEST_CASE("jackknife flags throwing replicates and validates groups") {
  const auto est = [&](const std::vector<int>& keep) -> std::vector<double> {
    for (int i : keep) {
      if (i == 0) return {1.0};  // fine while unit 0 is kept
    }
    throw numeric_error("needs unit 0");
  };
  const JackknifeResult r = jackknife_se(10, 10, 4, est);
  CHECK(r.failed_replicates.size() == 1);
  REQUIRE(r.se.size() == 1);
  CHECK(r.se[0] == 0.0);  // all surviving replicates identical

  CHECK_THROWS_AS(jackknife_se(10, 1, 4, est), data_error);
  CHECK_THROWS_AS(jackknife_se(3, 10, 4, est), data_error);
}

TEST_CASE("design_totals accumulates population rows") {
  const CovariateSchema s = gh_schema();
  const Design design(s, main_effects_formula(s));
  const CellTable pop = population_over(s, {100, 200, 300, 150, 100, 150});
  const Eigen::VectorXd t = design_totals(design, pop);
  const auto cells = all_cells(s);
  Eigen::VectorXd want = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(design.n_columns()));
  const Eigen::MatrixXd X = design.matrix_for_cells(cells);
  for (std::size_t j = 0; j < cells.size(); ++j) {
    const CellRow* row = pop.find(cells[j]);
    want += row->count * X.row(static_cast<Eigen::Index>(j)).transpose();
  }
  for (Eigen::Index k = 0; k < t.size(); ++k) {
    CHECK(t[k] == doctest::Approx(want[k]).epsilon(1e-12));
  }
}

}
