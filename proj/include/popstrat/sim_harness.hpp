#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/csv.hpp"
#include "popstrat/diagnostics.hpp"
#include "popstrat/hb_engine.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/rng.hpp"

namespace popstrat {

enum class Scenario { correct, incorrect };

Scenario parse_scenario(std::string_view text);
std::string_view to_string(Scenario scenario);

// The full method roster, in report order.
const std::vector<std::string>& all_sim_methods();

struct SimConfig {
  long long N = 50000;
  int n_nonprob = 1000;
  int n_ref = 1000;
  double internet_fraction = 0.65;
  std::vector<double> selection_rates = {0.12, 0.31, 0.19, 0.20, 0.13, 0.05};
  int coef_min = -5;  // outcome coefficients are integers in [coef_min, coef_max]
  int coef_max = 5;
  double noise_sd = 1.0;
  Scenario scenario = Scenario::correct;
  // 0 resolves to 50 when any MRP method is requested, 1000 otherwise.
  int replications = 0;
  std::uint64_t seed = 1;
  int wfpbb_populations = 100;  // L
  std::vector<std::string> methods;  // empty: all
  McmcConfig mcmc;
  int jackknife_groups = 20;
  // A replication is dropped for the MRP methods when the fit violates
  // either bound (split R-hat, |posterior mean| / prior scale).
  double rhat_limit = 1.2;
  double coef_prior_limit = 10.0;

  void validate() const;
  std::vector<std::string> methods_or_all() const;
  int resolved_replications() const;
};

// key = value lines; '#' comments; unknown keys are errors.
SimConfig parse_sim_config(std::string_view text);
std::string format_sim_config(const SimConfig& cfg);

// One fixed finite population per study. The respondent-structure summary
// describes the selection mechanism cell by cell (internet share times the
// stratum sampling fraction); cells that cannot be selected are left out and
// counted in summary_excluded_cells.
struct GeneratedPopulation {
  Microdata units;            // covariates + outcome
  std::vector<int> internet;  // per-unit indicator
  CellTable cells;            // population cell counts
  PopulationSpec summary;
  long long summary_excluded_cells = 0;
  std::vector<long long> coefficients;  // drawn outcome coefficients, design order
  std::vector<std::string> coefficient_names;
  double truth_overall = 0.0;
  std::vector<double> truth_by_age;  // aligned with the age levels
};

GeneratedPopulation generate_population(const SimConfig& cfg, Rng& rng);

struct DrawnSamples {
  Microdata nonprob;
  Microdata reference;  // carries design weight N / n_ref
};

// Nonprobability sample: per-age-stratum Bernoulli selection within the
// internet subpopulation at probabilities proportional to the configured
// rates (rescaled so the expected total is n_nonprob), then uniform
// thinning/augmentation within each stratum to hit the stratum's expected
// size exactly. Reference sample: SRS without replacement, carrying the
// design weight N / n_ref. Throws data_error when a stratum's target
// exceeds its internet population.
DrawnSamples draw_samples(const GeneratedPopulation& pop, const SimConfig& cfg, Rng& rng);

struct ReplicationRow {
  int replication = 0;
  std::string method;
  std::string group;
  double estimate = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int excluded = 0;  // 1: dropped from aggregation (convergence rule or failure)
  std::string note;
};

struct ReportRow {
  std::string method;
  std::string group;
  double truth = 0.0;
  double rel_bias = 0.0;
  double rmse = 0.0;
  double avg_se = 0.0;
  double coverage = 0.0;
  int n_used = 0;
  int excluded = 0;
};

// Study-level facts carried into provenance output.
struct StudyInfo {
  std::vector<long long> coefficients;
  std::vector<std::string> coefficient_names;
  double truth_overall = 0.0;
  std::vector<double> truth_by_age;
  std::vector<std::string> groups;  // report order
  double realized_internet_share = 0.0;
  long long summary_excluded_cells = 0;
};

struct SimReport {
  std::vector<ReportRow> rows;
  std::vector<ReplicationRow> log;
  StudyInfo info;
  int mrp_excluded = 0;   // replications dropped for MRP-S/P/R
  int int_excluded = 0;   // replications dropped for MRP-INT
  int hard_failures = 0;  // method runs that threw
  double runtime_seconds = 0.0;  // provenance only, never serialized to CSV
};

SimReport run_study(const SimConfig& cfg);

// Byte-stable renderings for the simulate subcommand.
CsvTable report_csv(const SimReport& report);
CsvTable replication_csv(const SimReport& report);
std::string provenance_text(const SimConfig& cfg, const SimReport& report);

// Recomputes report rows from the log (aggregation oracle used by tests).
std::vector<ReportRow> aggregate_log(const std::vector<ReplicationRow>& log,
                                     const std::vector<std::string>& methods,
                                     const std::vector<std::string>& groups,
                                     const std::vector<double>& truths, int replications);

}  // namespace popstrat
