#include "popstrat/sim_harness.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <string>
#include <utility>

#include "popstrat/design_estimators.hpp"
#include "popstrat/estimates.hpp"
#include "popstrat/formula.hpp"
#include "popstrat/mrp.hpp"

namespace popstrat {

namespace {

// Built-in population structure: four categorical covariates with education
// shares conditional on age, and an internet-access model that tilts toward
// younger, more educated units so nonprobability samples overrepresent both.
constexpr int kNAge = 6;
constexpr int kNRace = 3;
constexpr int kNEdu = 4;
constexpr int kNInc = 5;

constexpr const char* kAgeLevels[kNAge] = {"18-24", "25-34", "35-44",
                                           "45-54", "55-64", "65+"};
constexpr const char* kRaceLevels[kNRace] = {"white", "black", "other"};
constexpr const char* kEduLevels[kNEdu] = {"no-hs", "hs", "some-college", "college"};
constexpr const char* kIncLevels[kNInc] = {"q1", "q2", "q3", "q4", "q5"};

constexpr double kAgeShares[kNAge] = {0.06, 0.13, 0.18, 0.21, 0.20, 0.22};
constexpr double kRaceShares[kNRace] = {0.80, 0.14, 0.06};
// Rows are age levels; each row sums to one.
constexpr double kEduByAge[kNAge][kNEdu] = {
    {0.06, 0.26, 0.38, 0.30}, {0.07, 0.27, 0.36, 0.30}, {0.08, 0.29, 0.35, 0.28},
    {0.10, 0.31, 0.34, 0.25}, {0.12, 0.33, 0.33, 0.22}, {0.16, 0.36, 0.30, 0.18}};
constexpr double kIncShares[kNInc] = {0.15, 0.25, 0.25, 0.20, 0.15};

// Logit shifts of the internet-access model; the intercept is calibrated at
// generation time so the population internet share matches the config.
constexpr double kNetAgeShift[kNAge] = {1.2, 0.9, 0.5, 0.1, -0.4, -1.0};
constexpr double kNetEduShift[kNEdu] = {-0.8, -0.2, 0.2, 0.6};

constexpr std::string_view kCorrectModel = "age+race+edu+inc+age*edu+race*inc";
// Fixed outcome intercept: keeps population means far from zero so relative
// bias is a stable metric across coefficient draws.
constexpr long long kOutcomeIntercept = 20;

// Seed tags for the deterministic per-stage RNG streams.
constexpr std::uint64_t kSeedPopulation = 0xA0;
constexpr std::uint64_t kSeedReplication = 0xB0;
constexpr std::uint64_t kSeedJackknifeJoint = 0xC0;
constexpr std::uint64_t kSeedJackknifeSample = 0xC1;
constexpr std::uint64_t kSeedMrp = 0xD0;
constexpr std::uint64_t kSeedMrpInt = 0xD1;

CovariateSchema sim_schema() {
  CovariateSchema schema;
  schema.variables.push_back({"age", {std::begin(kAgeLevels), std::end(kAgeLevels)}});
  schema.variables.push_back({"race", {std::begin(kRaceLevels), std::end(kRaceLevels)}});
  schema.variables.push_back({"edu", {std::begin(kEduLevels), std::end(kEduLevels)}});
  schema.variables.push_back({"inc", {std::begin(kIncLevels), std::end(kIncLevels)}});
  return schema;
}

double invlogit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int draw_level(Rng& rng, const double* shares, int k) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (int i = 0; i + 1 < k; ++i) {
    cum += shares[i];
    if (u < cum) return i;
  }
  return k - 1;
}

std::string trimmed(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_list(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      auto piece = trimmed(s.substr(start, i - start));
      if (!piece.empty()) out.push_back(std::move(piece));
      start = i + 1;
    }
  }
  return out;
}

template <typename T, typename Fn>
std::string join(const std::vector<T>& values, char sep, Fn&& render) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out.push_back(sep);
    out += render(values[i]);
  }
  return out;
}

// Integer stratum targets: expected counts n * rate_a * M_a / Sum rate * M
// rounded by largest remainder so they sum to n exactly. M_a is the internet
// count of age stratum a.
std::vector<long long> stratum_targets(const std::vector<long long>& internet_by_age,
                                       const SimConfig& cfg) {
  std::vector<double> w(kNAge, 0.0);
  double total = 0.0;
  for (int a = 0; a < kNAge; ++a) {
    w[a] = cfg.selection_rates[static_cast<std::size_t>(a)] *
           static_cast<double>(internet_by_age[static_cast<std::size_t>(a)]);
    total += w[a];
  }
  if (!(total > 0.0)) throw data_error("draw_samples: no internet units are selectable");
  std::vector<long long> alloc(kNAge, 0);
  std::vector<std::pair<double, int>> rem;
  long long assigned = 0;
  for (int a = 0; a < kNAge; ++a) {
    const double exact = static_cast<double>(cfg.n_nonprob) * w[a] / total;
    alloc[static_cast<std::size_t>(a)] = static_cast<long long>(std::floor(exact));
    assigned += alloc[static_cast<std::size_t>(a)];
    rem.emplace_back(exact - std::floor(exact), a);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  for (long long k = 0; k < cfg.n_nonprob - assigned; ++k) {
    ++alloc[static_cast<std::size_t>(rem[static_cast<std::size_t>(k) % kNAge].second)];
  }
  for (int a = 0; a < kNAge; ++a) {
    if (alloc[static_cast<std::size_t>(a)] > internet_by_age[static_cast<std::size_t>(a)]) {
      throw data_error("draw_samples: stratum exhausted: age stratum '" +
                       std::string(kAgeLevels[a]) + "' needs " +
                       std::to_string(alloc[static_cast<std::size_t>(a)]) + " of " +
                       std::to_string(internet_by_age[static_cast<std::size_t>(a)]) +
                       " internet units");
    }
  }
  return alloc;
}

}  // namespace

Scenario parse_scenario(std::string_view text) {
  if (text == "correct") return Scenario::correct;
  if (text == "incorrect") return Scenario::incorrect;
  throw data_error("unknown scenario '" + std::string(text) +
                   "' (expected 'correct' or 'incorrect')");
}

std::string_view to_string(Scenario scenario) {
  return scenario == Scenario::correct ? "correct" : "incorrect";
}

const std::vector<std::string>& all_sim_methods() {
  static const std::vector<std::string> kMethods = {
      "UnW", "PS", "IPW", "GREG", "Raking", "DR", "MRP-S", "MRP-P", "MRP-R", "MRP-INT"};
  return kMethods;
}

void SimConfig::validate() const {
  if (N < 1) throw data_error("sim config: N must be positive");
  if (N > 2000000000LL) throw data_error("sim config: N exceeds the supported range");
  if (n_nonprob < 1) throw data_error("sim config: n_nonprob must be positive");
  if (n_ref < 1) throw data_error("sim config: n_ref must be positive");
  if (static_cast<long long>(n_ref) > N)
    throw data_error("sim config: n_ref cannot exceed N");
  if (!(internet_fraction > 0.0 && internet_fraction <= 1.0))
    throw data_error("sim config: internet_fraction must lie in (0, 1]");
  if (selection_rates.size() != static_cast<std::size_t>(kNAge))
    throw data_error("sim config: selection_rates needs one rate per age stratum (" +
                     std::to_string(kNAge) + ")");
  for (double r : selection_rates) {
    if (!(r > 0.0 && r <= 1.0))
      throw data_error("sim config: selection rates must lie in (0, 1]");
  }
  if (coef_min > coef_max) throw data_error("sim config: coef_min exceeds coef_max");
  if (!(noise_sd >= 0.0)) throw data_error("sim config: noise_sd must be nonnegative");
  if (replications < 0) throw data_error("sim config: replications must be nonnegative");
  if (wfpbb_populations < 1)
    throw data_error("sim config: wfpbb_populations must be positive");
  if (jackknife_groups < 2) throw data_error("sim config: jackknife_groups must be at least 2");
  if (jackknife_groups > n_nonprob)
    throw data_error("sim config: jackknife_groups cannot exceed n_nonprob");
  if (!(rhat_limit > 1.0)) throw data_error("sim config: rhat_limit must exceed 1");
  if (!(coef_prior_limit > 0.0))
    throw data_error("sim config: coef_prior_limit must be positive");
  mcmc.validate();
  methods_or_all();  // rejects unknown method names
}

std::vector<std::string> SimConfig::methods_or_all() const {
  const auto& roster = all_sim_methods();
  if (methods.empty()) return roster;
  for (const auto& m : methods) {
    if (std::find(roster.begin(), roster.end(), m) == roster.end())
      throw data_error("sim config: unknown method '" + m + "'");
  }
  const std::set<std::string> asked(methods.begin(), methods.end());
  std::vector<std::string> out;
  for (const auto& m : roster) {
    if (asked.count(m)) out.push_back(m);
  }
  return out;
}

int SimConfig::resolved_replications() const {
  if (replications > 0) return replications;
  for (const auto& m : methods_or_all()) {
    if (m.rfind("MRP-", 0) == 0) return 50;
  }
  return 1000;
}

SimConfig parse_sim_config(std::string_view text) {
  SimConfig cfg;
  std::size_t start = 0;
  int line_no = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i != text.size() && text[i] != '\n') continue;
    ++line_no;
    std::string line = trimmed(text.substr(start, i - start));
    start = i + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw data_error("sim config line " + std::to_string(line_no) +
                       ": expected key = value, got '" + line + "'");
    const std::string key = trimmed(line.substr(0, eq));
    const std::string value = trimmed(line.substr(eq + 1));
    const std::string context = "sim config key '" + key + "'";
    if (key == "N") {
      cfg.N = parse_int(value, context);
    } else if (key == "n_nonprob") {
      cfg.n_nonprob = static_cast<int>(parse_int(value, context));
    } else if (key == "n_ref") {
      cfg.n_ref = static_cast<int>(parse_int(value, context));
    } else if (key == "internet_fraction") {
      cfg.internet_fraction = parse_double(value, context);
    } else if (key == "selection_rates") {
      cfg.selection_rates.clear();
      for (const auto& piece : split_list(value, ','))
        cfg.selection_rates.push_back(parse_double(piece, context));
    } else if (key == "coef_min") {
      cfg.coef_min = static_cast<int>(parse_int(value, context));
    } else if (key == "coef_max") {
      cfg.coef_max = static_cast<int>(parse_int(value, context));
    } else if (key == "noise_sd") {
      cfg.noise_sd = parse_double(value, context);
    } else if (key == "scenario") {
      cfg.scenario = parse_scenario(value);
    } else if (key == "replications") {
      cfg.replications = static_cast<int>(parse_int(value, context));
    } else if (key == "seed") {
      const long long s = parse_int(value, context);
      if (s < 0) throw data_error("sim config: seed must be nonnegative");
      cfg.seed = static_cast<std::uint64_t>(s);
    } else if (key == "wfpbb_populations") {
      cfg.wfpbb_populations = static_cast<int>(parse_int(value, context));
    } else if (key == "methods") {
      cfg.methods = split_list(value, ',');
    } else if (key == "chains") {
      cfg.mcmc.chains = static_cast<int>(parse_int(value, context));
    } else if (key == "iterations") {
      cfg.mcmc.iterations = static_cast<int>(parse_int(value, context));
    } else if (key == "warmup") {
      cfg.mcmc.warmup = static_cast<int>(parse_int(value, context));
    } else if (key == "threads") {
      cfg.mcmc.threads = static_cast<int>(parse_int(value, context));
    } else if (key == "jackknife_groups") {
      cfg.jackknife_groups = static_cast<int>(parse_int(value, context));
    } else if (key == "rhat_limit") {
      cfg.rhat_limit = parse_double(value, context);
    } else if (key == "coef_prior_limit") {
      cfg.coef_prior_limit = parse_double(value, context);
    } else {
      throw data_error("sim config line " + std::to_string(line_no) + ": unknown key '" +
                       key + "'");
    }
  }
  return cfg;
}

std::string format_sim_config(const SimConfig& cfg) {
  std::string out;
  out += "scenario=" + std::string(to_string(cfg.scenario)) + "\n";
  out += "N=" + std::to_string(cfg.N) + "\n";
  out += "n_nonprob=" + std::to_string(cfg.n_nonprob) + "\n";
  out += "n_ref=" + std::to_string(cfg.n_ref) + "\n";
  out += "internet_fraction=" + format_double(cfg.internet_fraction) + "\n";
  out += "selection_rates=" +
         join(cfg.selection_rates, ',', [](double r) { return format_double(r); }) + "\n";
  out += "coef_min=" + std::to_string(cfg.coef_min) + "\n";
  out += "coef_max=" + std::to_string(cfg.coef_max) + "\n";
  out += "noise_sd=" + format_double(cfg.noise_sd) + "\n";
  out += "replications=" + std::to_string(cfg.replications) + "\n";
  out += "seed=" + std::to_string(cfg.seed) + "\n";
  out += "wfpbb_populations=" + std::to_string(cfg.wfpbb_populations) + "\n";
  out += "methods=" + join(cfg.methods, ',', [](const std::string& m) { return m; }) + "\n";
  out += "chains=" + std::to_string(cfg.mcmc.chains) + "\n";
  out += "iterations=" + std::to_string(cfg.mcmc.iterations) + "\n";
  out += "warmup=" + std::to_string(cfg.mcmc.warmup) + "\n";
  out += "threads=" + std::to_string(cfg.mcmc.threads) + "\n";
  out += "jackknife_groups=" + std::to_string(cfg.jackknife_groups) + "\n";
  out += "rhat_limit=" + format_double(cfg.rhat_limit) + "\n";
  out += "coef_prior_limit=" + format_double(cfg.coef_prior_limit) + "\n";
  return out;
}

GeneratedPopulation generate_population(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  GeneratedPopulation pop;
  const CovariateSchema schema = sim_schema();
  pop.units = Microdata(schema);
  const long long N = cfg.N;

  std::vector<int> age(static_cast<std::size_t>(N));
  std::vector<int> race(static_cast<std::size_t>(N));
  std::vector<int> edu(static_cast<std::size_t>(N));
  std::vector<int> inc(static_cast<std::size_t>(N));
  std::vector<long long> ae_count(kNAge * kNEdu, 0);
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    age[u] = draw_level(rng, kAgeShares, kNAge);
    race[u] = draw_level(rng, kRaceShares, kNRace);
    edu[u] = draw_level(rng, kEduByAge[age[u]], kNEdu);
    inc[u] = draw_level(rng, kIncShares, kNInc);
    ++ae_count[static_cast<std::size_t>(age[u] * kNEdu + edu[u])];
  }

  // Internet model: logit q = t + age shift + edu shift, with t calibrated by
  // bisection so the mean of q over the realized population hits the target.
  std::vector<double> net_prob(static_cast<std::size_t>(N), 1.0);
  if (cfg.internet_fraction < 1.0) {
    const auto mean_q = [&](double t) {
      double s = 0.0;
      for (int a = 0; a < kNAge; ++a) {
        for (int e = 0; e < kNEdu; ++e) {
          s += static_cast<double>(ae_count[static_cast<std::size_t>(a * kNEdu + e)]) *
               invlogit(t + kNetAgeShift[a] + kNetEduShift[e]);
        }
      }
      return s / static_cast<double>(N);
    };
    double lo = -40.0;
    double hi = 40.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (mean_q(mid) < cfg.internet_fraction ? lo : hi) = mid;
    }
    const double t = 0.5 * (lo + hi);
    for (long long i = 0; i < N; ++i) {
      const auto u = static_cast<std::size_t>(i);
      net_prob[u] = invlogit(t + kNetAgeShift[age[u]] + kNetEduShift[edu[u]]);
    }
  }
  pop.internet.resize(static_cast<std::size_t>(N));
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    pop.internet[u] = rng.uniform() < net_prob[u] ? 1 : 0;
  }

  // Outcome: fixed intercept plus integer coefficients on the dummy columns
  // of the full (interaction) model, plus Gaussian noise.
  const ModelFormula correct_model = parse_formula(kCorrectModel, schema);
  const Design design(schema, correct_model);
  pop.coefficient_names = design.column_names();
  pop.coefficients.assign(design.n_columns(), 0);
  pop.coefficients[0] = kOutcomeIntercept;
  const auto span =
      static_cast<std::uint64_t>(static_cast<long long>(cfg.coef_max) - cfg.coef_min + 1);
  for (std::size_t k = 1; k < design.n_columns(); ++k) {
    pop.coefficients[k] = cfg.coef_min + static_cast<long long>(rng.uniform_index(span));
  }

  const auto keys = all_cells(schema);
  std::vector<double> cell_lp(keys.size(), 0.0);
  Eigen::RowVectorXd xrow(design.n_columns());
  for (std::size_t r = 0; r < keys.size(); ++r) {
    design.fill_row(keys[r], std::nullopt, xrow);
    double lp = 0.0;
    for (std::size_t k = 0; k < design.n_columns(); ++k) {
      lp += static_cast<double>(pop.coefficients[k]) * xrow[static_cast<Eigen::Index>(k)];
    }
    cell_lp[r] = lp;
  }

  std::vector<double> y(static_cast<std::size_t>(N));
  std::vector<std::size_t> rank(static_cast<std::size_t>(N));
  std::vector<int> levels(schema.n_vars());
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    levels[0] = age[u];
    levels[1] = race[u];
    levels[2] = edu[u];
    levels[3] = inc[u];
    rank[u] = cell_rank(schema, CellKey{levels});
    y[u] = cell_lp[rank[u]] + cfg.noise_sd * rng.normal();
    pop.units.append(levels, y[u]);
  }

  pop.cells = build_cell_table(pop.units, CellRole::population);

  struct Acc {
    long long n = 0;
    long long n_int = 0;
    double sum = 0.0;
    double sum_int = 0.0;
    double sumsq = 0.0;
  };
  std::vector<Acc> acc(keys.size());
  std::vector<long long> net_by_age(kNAge, 0);
  double sum_all = 0.0;
  std::vector<double> age_sum(kNAge, 0.0);
  std::vector<long long> age_n(kNAge, 0);
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    auto& a = acc[rank[u]];
    ++a.n;
    a.sum += y[u];
    if (pop.internet[u]) {
      ++a.n_int;
      a.sum_int += y[u];
      ++net_by_age[static_cast<std::size_t>(age[u])];
    }
    sum_all += y[u];
    age_sum[static_cast<std::size_t>(age[u])] += y[u];
    ++age_n[static_cast<std::size_t>(age[u])];
  }
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const auto& a = acc[rank[u]];
    const double d = y[u] - a.sum / static_cast<double>(a.n);
    acc[rank[u]].sumsq += d * d;
  }

  pop.truth_overall = sum_all / static_cast<double>(N);
  pop.truth_by_age.resize(kNAge);
  for (int a = 0; a < kNAge; ++a) {
    const auto s = static_cast<std::size_t>(a);
    pop.truth_by_age[s] = age_n[s] > 0 ? age_sum[s] / static_cast<double>(age_n[s])
                                       : std::numeric_limits<double>::quiet_NaN();
  }

  // Selection-mechanism summary: per cell, inclusion probability = internet
  // share of the cell times the sampling fraction of its age stratum; the
  // nonrespondent mean is backed out so the cell-mean identity holds exactly.
  const auto targets = stratum_targets(net_by_age, cfg);
  std::vector<double> frac(kNAge, 0.0);
  for (int a = 0; a < kNAge; ++a) {
    const auto s = static_cast<std::size_t>(a);
    if (net_by_age[s] > 0) {
      frac[s] = std::min(1.0, static_cast<double>(targets[s]) /
                                  static_cast<double>(net_by_age[s]));
    }
  }
  pop.summary.schema = schema;
  for (std::size_t r = 0; r < keys.size(); ++r) {
    const auto& a = acc[r];
    if (a.n == 0) continue;  // cell absent from the population
    const auto age_level = static_cast<std::size_t>(keys[r].levels[0]);
    const double psi =
        (static_cast<double>(a.n_int) / static_cast<double>(a.n)) * frac[age_level];
    if (!(psi > 0.0)) {
      ++pop.summary_excluded_cells;
      continue;
    }
    PopulationSpecCell cell;
    cell.key = keys[r];
    cell.label = cell_label(schema, keys[r]);
    cell.N = static_cast<double>(a.n);
    cell.psi = psi;
    cell.mean_respondents = a.sum_int / static_cast<double>(a.n_int);
    const double cell_mean = a.sum / static_cast<double>(a.n);
    cell.mean_nonrespondents =
        psi < 1.0 ? (cell_mean - psi * cell.mean_respondents) / (1.0 - psi)
                  : cell.mean_respondents;
    const double sd =
        a.n >= 2 ? std::sqrt(std::max(0.0, a.sumsq) / static_cast<double>(a.n - 1)) : 0.0;
    cell.sd = std::max(sd, 1e-9);
    pop.summary.cells.push_back(std::move(cell));
  }
  pop.summary.validate();
  return pop;
}

DrawnSamples draw_samples(const GeneratedPopulation& pop, const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  const CovariateSchema& schema = pop.units.schema();
  const auto N = static_cast<long long>(pop.units.size());
  if (static_cast<long long>(pop.internet.size()) != N)
    throw data_error("draw_samples: internet indicator length mismatch");
  if (static_cast<long long>(cfg.n_ref) > N)
    throw data_error("draw_samples: n_ref exceeds the population size");
  const std::size_t age_var = schema.require_var("age");

  std::vector<std::vector<int>> strata(kNAge);
  for (long long i = 0; i < N; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (pop.internet[u]) {
      strata[static_cast<std::size_t>(pop.units.level(age_var, u))].push_back(
          static_cast<int>(i));
    }
  }
  std::vector<long long> net_by_age(kNAge, 0);
  for (int a = 0; a < kNAge; ++a) {
    net_by_age[static_cast<std::size_t>(a)] =
        static_cast<long long>(strata[static_cast<std::size_t>(a)].size());
  }
  const auto targets = stratum_targets(net_by_age, cfg);

  // Bernoulli selection at rates rescaled to the expected total, then uniform
  // thinning/augmentation within each stratum to its exact target size.
  double denom = 0.0;
  for (int a = 0; a < kNAge; ++a) {
    denom += cfg.selection_rates[static_cast<std::size_t>(a)] *
             static_cast<double>(net_by_age[static_cast<std::size_t>(a)]);
  }
  const double scale = static_cast<double>(cfg.n_nonprob) / denom;

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(cfg.n_nonprob));
  for (int a = 0; a < kNAge; ++a) {
    const auto s = static_cast<std::size_t>(a);
    const double p = std::min(1.0, scale * cfg.selection_rates[s]);
    std::vector<int> in;
    std::vector<int> rest;
    for (std::size_t pos = 0; pos < strata[s].size(); ++pos) {
      (rng.uniform() < p ? in : rest).push_back(static_cast<int>(pos));
    }
    const long long want = targets[s];
    if (static_cast<long long>(in.size()) > want) {
      const auto drop = rng.sample_without_replacement(
          static_cast<int>(in.size()), static_cast<int>(static_cast<long long>(in.size()) - want));
      std::vector<char> dead(in.size(), 0);
      for (int d : drop) dead[static_cast<std::size_t>(d)] = 1;
      std::vector<int> kept;
      kept.reserve(static_cast<std::size_t>(want));
      for (std::size_t k = 0; k < in.size(); ++k) {
        if (!dead[k]) kept.push_back(in[k]);
      }
      in.swap(kept);
    } else if (static_cast<long long>(in.size()) < want) {
      const auto add = rng.sample_without_replacement(
          static_cast<int>(rest.size()), static_cast<int>(want - static_cast<long long>(in.size())));
      for (int k : add) in.push_back(rest[static_cast<std::size_t>(k)]);
    }
    for (int pos : in) chosen.push_back(strata[s][static_cast<std::size_t>(pos)]);
  }
  std::sort(chosen.begin(), chosen.end());

  DrawnSamples out;
  out.nonprob = Microdata(schema);
  out.reference = Microdata(schema);
  std::vector<int> levels(schema.n_vars());
  for (int unit : chosen) {
    const auto u = static_cast<std::size_t>(unit);
    for (std::size_t v = 0; v < schema.n_vars(); ++v) levels[v] = pop.units.level(v, u);
    out.nonprob.append(levels, pop.units.outcome(u));
  }
  auto ref_ids = rng.sample_without_replacement(static_cast<int>(N), cfg.n_ref);
  std::sort(ref_ids.begin(), ref_ids.end());
  const double ref_weight = static_cast<double>(N) / static_cast<double>(cfg.n_ref);
  for (int unit : ref_ids) {
    const auto u = static_cast<std::size_t>(unit);
    for (std::size_t v = 0; v < schema.n_vars(); ++v) levels[v] = pop.units.level(v, u);
    out.reference.append(levels, std::nullopt, ref_weight);
  }
  return out;
}

SimReport run_study(const SimConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  Rng pop_rng(derive_seed(cfg.seed, kSeedPopulation));
  const GeneratedPopulation pop = generate_population(cfg, pop_rng);
  const CovariateSchema& schema = pop.units.schema();
  const Grouping grouping = Grouping::overall_and_levels(schema, "age");
  const auto methods = cfg.methods_or_all();
  const std::set<std::string> wanted(methods.begin(), methods.end());
  const int reps = cfg.resolved_replications();

  SimReport report;
  report.info.coefficients = pop.coefficients;
  report.info.coefficient_names = pop.coefficient_names;
  report.info.truth_overall = pop.truth_overall;
  report.info.truth_by_age = pop.truth_by_age;
  for (const auto& g : grouping.groups) report.info.groups.push_back(g.label);
  long long net_total = 0;
  for (int flag : pop.internet) net_total += flag;
  report.info.realized_internet_share =
      static_cast<double>(net_total) / static_cast<double>(pop.internet.size());
  report.info.summary_excluded_cells = pop.summary_excluded_cells;

  std::vector<double> truths;
  truths.push_back(pop.truth_overall);
  truths.insert(truths.end(), pop.truth_by_age.begin(), pop.truth_by_age.end());

  const ModelFormula main_model = main_effects_formula(schema);
  const ModelFormula full_model = parse_formula(kCorrectModel, schema);
  const ModelFormula& outcome_model =
      cfg.scenario == Scenario::correct ? full_model : main_model;

  // Comparator weighting methods always use the main-effects model.
  const Design comp_design(schema, main_model);
  const Eigen::VectorXd comp_totals = design_totals(comp_design, pop.cells);
  std::vector<RakingMargin> margins;
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    RakingMargin m;
    m.variable = schema.variables[v].name;
    m.targets.assign(schema.variables[v].levels.size(), 0.0);
    for (const auto& row : pop.cells.rows) {
      m.targets[static_cast<std::size_t>(row.key.levels[v])] += row.count;
    }
    margins.push_back(std::move(m));
  }

  CellTable unknown_cells;  // MRP-R sees the schema but no population counts
  unknown_cells.schema = schema;
  unknown_cells.role = CellRole::population;

  MrpOptions mrp_opts;
  mrp_opts.wfpbb_populations = cfg.wfpbb_populations;

  const bool want_ipw = wanted.count("IPW") > 0;
  const bool want_dr = wanted.count("DR") > 0;
  const bool want_greg = wanted.count("GREG") > 0;
  const bool want_rake = wanted.count("Raking") > 0;
  const bool want_s = wanted.count("MRP-S") > 0;
  const bool want_p = wanted.count("MRP-P") > 0;
  const bool want_r = wanted.count("MRP-R") > 0;
  const bool want_int = wanted.count("MRP-INT") > 0;

  for (int rep = 0; rep < reps; ++rep) {
    const std::uint64_t rep_seed =
        derive_seed(cfg.seed, kSeedReplication, static_cast<std::uint64_t>(rep));
    Rng rep_rng(rep_seed);
    const DrawnSamples draws = draw_samples(pop, cfg, rep_rng);
    const Microdata& np = draws.nonprob;
    const CellTable sample_cells = build_cell_table(np, CellRole::sample);

    const auto log_rows = [&](const std::vector<EstimateSummary>& est, int excluded,
                              const std::string& note) {
      for (const auto& e : est) {
        report.log.push_back(
            {rep, e.method, e.group, e.estimate, e.se, e.ci_low, e.ci_high, excluded, note});
      }
    };
    const auto log_failure = [&](const std::string& method, const std::string& what) {
      ++report.hard_failures;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      for (const auto& g : grouping.groups) {
        report.log.push_back({rep, method, g.label, nan, nan, nan, nan, 1, what});
      }
    };
    const auto attach_se = [&](std::vector<EstimateSummary>& est, const JackknifeResult& jk,
                               std::size_t& pos) {
      for (auto& e : est) {
        e.se = jk.se[pos++];
        e.ci_low = e.estimate - kZ975 * e.se;
        e.ci_high = e.estimate + kZ975 * e.se;
      }
    };

    if (wanted.count("UnW") > 0) {
      try {
        log_rows(unweighted_mean(sample_cells, grouping), 0, "");
      } catch (const std::exception& e) {
        log_failure("UnW", e.what());
      }
    }
    if (wanted.count("PS") > 0) {
      try {
        log_rows(poststratified_mean(sample_cells, pop.cells, grouping), 0, "");
      } catch (const std::exception& e) {
        log_failure("PS", e.what());
      }
    }

    if (want_ipw || want_dr) {
      try {
        const PropensityFit fit =
            fit_inclusion_model(concat_for_inclusion(np, draws.reference), main_model);
        const std::vector<double> props(fit.fitted.begin(),
                                        fit.fitted.begin() + static_cast<std::ptrdiff_t>(np.size()));
        std::vector<EstimateSummary> ipw_est;
        std::vector<EstimateSummary> dr_est;
        if (want_ipw) ipw_est = ipw_mean(np, props, grouping, std::nullopt);
        if (want_dr) dr_est = dr_mean(np, comp_design, pop.cells, props, std::nullopt, grouping);

        const std::size_t n_np = np.size();
        const auto replicate = [&](const std::vector<int>& keep) {
          std::vector<int> np_keep;
          std::vector<int> ref_keep;
          for (int u : keep) {
            if (static_cast<std::size_t>(u) < n_np) {
              np_keep.push_back(u);
            } else {
              ref_keep.push_back(u - static_cast<int>(n_np));
            }
          }
          const Microdata np_sub = np.subset(np_keep);
          const Microdata ref_sub = draws.reference.subset(ref_keep);
          const PropensityFit f =
              fit_inclusion_model(concat_for_inclusion(np_sub, ref_sub), main_model);
          const std::vector<double> p(f.fitted.begin(),
                                      f.fitted.begin() + static_cast<std::ptrdiff_t>(np_keep.size()));
          std::vector<double> components;
          if (want_ipw) {
            for (const auto& e : ipw_mean(np_sub, p, grouping, std::nullopt))
              components.push_back(e.estimate);
          }
          if (want_dr) {
            for (const auto& e :
                 dr_mean(np_sub, comp_design, pop.cells, p, std::nullopt, grouping))
              components.push_back(e.estimate);
          }
          return components;
        };
        const JackknifeResult jk =
            jackknife_se(n_np + draws.reference.size(), cfg.jackknife_groups,
                         derive_seed(rep_seed, kSeedJackknifeJoint), replicate);
        const std::string note =
            jk.failed_replicates.empty()
                ? std::string()
                : std::to_string(jk.failed_replicates.size()) + " jackknife replicates failed";
        std::size_t pos = 0;
        if (want_ipw) {
          attach_se(ipw_est, jk, pos);
          log_rows(ipw_est, 0, note);
        }
        if (want_dr) {
          attach_se(dr_est, jk, pos);
          log_rows(dr_est, 0, note);
        }
      } catch (const std::exception& e) {
        if (want_ipw) log_failure("IPW", e.what());
        if (want_dr) log_failure("DR", e.what());
      }
    }

    if (want_greg || want_rake) {
      try {
        WeightVector base;
        base.values.assign(np.size(), static_cast<double>(cfg.N) / static_cast<double>(np.size()));
        std::vector<EstimateSummary> greg_est;
        std::vector<EstimateSummary> rake_est;
        if (want_greg) greg_est = greg_mean(np, comp_design, comp_totals, base, grouping);
        if (want_rake) {
          rake_est = weighted_mean(np, rake_weights(np, base, margins), grouping, "Raking");
        }
        const auto replicate = [&](const std::vector<int>& keep) {
          const Microdata sub = np.subset(keep);
          WeightVector b;
          b.values.assign(sub.size(), static_cast<double>(cfg.N) / static_cast<double>(sub.size()));
          std::vector<double> components;
          if (want_greg) {
            for (const auto& e : greg_mean(sub, comp_design, comp_totals, b, grouping))
              components.push_back(e.estimate);
          }
          if (want_rake) {
            for (const auto& e :
                 weighted_mean(sub, rake_weights(sub, b, margins), grouping, "Raking"))
              components.push_back(e.estimate);
          }
          return components;
        };
        const JackknifeResult jk =
            jackknife_se(np.size(), cfg.jackknife_groups,
                         derive_seed(rep_seed, kSeedJackknifeSample), replicate);
        const std::string note =
            jk.failed_replicates.empty()
                ? std::string()
                : std::to_string(jk.failed_replicates.size()) + " jackknife replicates failed";
        std::size_t pos = 0;
        if (want_greg) {
          attach_se(greg_est, jk, pos);
          log_rows(greg_est, 0, note);
        }
        if (want_rake) {
          attach_se(rake_est, jk, pos);
          log_rows(rake_est, 0, note);
        }
      } catch (const std::exception& e) {
        if (want_greg) log_failure("GREG", e.what());
        if (want_rake) log_failure("Raking", e.what());
      }
    }

    if (want_s || want_p || want_r || want_int) {
      OutcomeModelSpec spec;
      spec.formula = outcome_model;
      // Returns 1 when the run was flagged by the convergence rule, 0 when
      // clean, -1 on a hard failure (already logged).
      const auto run_variant = [&](MrpVariant variant, const CellTable& population,
                                   const Microdata* reference, std::uint64_t seed_tag) -> int {
        McmcConfig mc = cfg.mcmc;
        mc.seed = derive_seed(rep_seed, seed_tag);
        const std::string method = "MRP-" + std::string(to_string(variant));
        try {
          const MrpResult res =
              mrp_estimate(variant, np, population, reference, spec, mc, grouping, mrp_opts);
          const bool flagged = res.max_rhat > cfg.rhat_limit ||
                               res.max_coef_prior_ratio > cfg.coef_prior_limit;
          std::string note;
          if (flagged) {
            note = "dropped by the convergence rule (max_rhat=" + format_double(res.max_rhat) +
                   ", coef_prior_ratio=" + format_double(res.max_coef_prior_ratio) + ")";
          }
          log_rows(res.estimates, flagged ? 1 : 0, note);
          return flagged ? 1 : 0;
        } catch (const std::exception& e) {
          log_failure(method, e.what());
          return -1;
        }
      };
      if (want_s || want_p || want_r) {
        bool flagged = false;
        if (want_s) flagged = run_variant(MrpVariant::S, pop.cells, nullptr, kSeedMrp) == 1 || flagged;
        if (want_p) flagged = run_variant(MrpVariant::P, pop.cells, nullptr, kSeedMrp) == 1 || flagged;
        if (want_r) {
          flagged =
              run_variant(MrpVariant::R, unknown_cells, &draws.reference, kSeedMrp) == 1 || flagged;
        }
        if (flagged) ++report.mrp_excluded;
      }
      if (want_int) {
        if (run_variant(MrpVariant::INT, pop.cells, &draws.reference, kSeedMrpInt) == 1) {
          ++report.int_excluded;
        }
      }
    }
  }

  report.rows = aggregate_log(report.log, methods, report.info.groups, truths, reps);
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

std::vector<ReportRow> aggregate_log(const std::vector<ReplicationRow>& log,
                                     const std::vector<std::string>& methods,
                                     const std::vector<std::string>& groups,
                                     const std::vector<double>& truths, int replications) {
  if (groups.size() != truths.size())
    throw data_error("aggregate_log: groups and truths differ in length");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<ReportRow> rows;
  for (const auto& method : methods) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      ReportRow r;
      r.method = method;
      r.group = groups[g];
      r.truth = truths[g];
      double sum_est = 0.0;
      double sum_sq_err = 0.0;
      double sum_se = 0.0;
      int n_se = 0;
      int covered = 0;
      int used = 0;
      for (const auto& row : log) {
        if (row.method != method || row.group != groups[g]) continue;
        if (row.excluded != 0 || !std::isfinite(row.estimate)) continue;
        ++used;
        sum_est += row.estimate;
        sum_sq_err += (row.estimate - r.truth) * (row.estimate - r.truth);
        if (std::isfinite(row.se)) {
          sum_se += row.se;
          ++n_se;
        }
        if (row.ci_low <= r.truth && r.truth <= row.ci_high) ++covered;
      }
      r.n_used = used;
      r.excluded = replications - used;
      if (used > 0) {
        const double mean_est = sum_est / used;
        r.rel_bias = r.truth != 0.0 ? (mean_est - r.truth) / r.truth : mean_est - r.truth;
        r.rmse = std::sqrt(sum_sq_err / used);
        r.avg_se = n_se > 0 ? sum_se / n_se : nan;
        r.coverage = static_cast<double>(covered) / static_cast<double>(used);
      } else {
        r.rel_bias = nan;
        r.rmse = nan;
        r.avg_se = nan;
        r.coverage = nan;
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

CsvTable report_csv(const SimReport& report) {
  CsvTable t;
  t.header = {"method", "group",    "truth",  "rel_bias", "rmse",
              "avg_se", "coverage", "n_used", "excluded"};
  for (const auto& r : report.rows) {
    t.rows.push_back({r.method, r.group, format_double(r.truth), format_double(r.rel_bias),
                      format_double(r.rmse), format_double(r.avg_se),
                      format_double(r.coverage), std::to_string(r.n_used),
                      std::to_string(r.excluded)});
  }
  return t;
}

CsvTable replication_csv(const SimReport& report) {
  CsvTable t;
  t.header = {"replication", "method", "group",    "estimate", "se",
              "ci_low",      "ci_high", "excluded", "note"};
  for (const auto& r : report.log) {
    t.rows.push_back({std::to_string(r.replication), r.method, r.group,
                      format_double(r.estimate), format_double(r.se), format_double(r.ci_low),
                      format_double(r.ci_high), std::to_string(r.excluded), r.note});
  }
  return t;
}

std::string provenance_text(const SimConfig& cfg, const SimReport& report) {
  std::string out;
  out += "simulation study provenance\n\n[config]\n";
  out += format_sim_config(cfg);
  out += "\n[study]\n";
  out += "resolved_replications=" + std::to_string(cfg.resolved_replications()) + "\n";
  out += "resolved_methods=" +
         join(cfg.methods_or_all(), ',', [](const std::string& m) { return m; }) + "\n";
  out += "realized_internet_share=" + format_double(report.info.realized_internet_share) + "\n";
  out += "summary_excluded_cells=" + std::to_string(report.info.summary_excluded_cells) + "\n";
  out += "truth[overall]=" + format_double(report.info.truth_overall) + "\n";
  for (std::size_t a = 0; a < report.info.truth_by_age.size(); ++a) {
    const std::string group =
        a + 1 < report.info.groups.size() ? report.info.groups[a + 1] : std::to_string(a);
    out += "truth[" + group + "]=" + format_double(report.info.truth_by_age[a]) + "\n";
  }
  for (std::size_t k = 0; k < report.info.coefficients.size(); ++k) {
    const std::string name = k < report.info.coefficient_names.size()
                                 ? report.info.coefficient_names[k]
                                 : std::to_string(k);
    out += "coef[" + name + "]=" + std::to_string(report.info.coefficients[k]) + "\n";
  }
  out += "mrp_excluded=" + std::to_string(report.mrp_excluded) + "\n";
  out += "int_excluded=" + std::to_string(report.int_excluded) + "\n";
  out += "hard_failures=" + std::to_string(report.hard_failures) + "\n";
  out += "runtime_seconds=" + format_double(report.runtime_seconds) + "\n";
  return out;
}

}  // namespace popstrat
