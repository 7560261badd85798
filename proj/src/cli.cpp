#include "popstrat/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/csv.hpp"
#include "popstrat/design_estimators.hpp"
#include "popstrat/diagnostics.hpp"
#include "popstrat/estimates.hpp"
#include "popstrat/formula.hpp"
#include "popstrat/hb_engine.hpp"
#include "popstrat/microdata.hpp"
#include "popstrat/mrp.hpp"
#include "popstrat/rng.hpp"
#include "popstrat/sim_harness.hpp"
#include "popstrat/wfpbb.hpp"

namespace popstrat {

namespace {

using nlohmann::json;

constexpr std::string_view kVersion = "1.0.0";

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* kDigits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

std::vector<std::string> split_commas(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == ',') {
      auto piece = std::string(s.substr(start, i - start));
      const auto b = piece.find_first_not_of(" \t");
      const auto e = piece.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(piece.substr(b, e - b + 1));
      start = i + 1;
    }
  }
  return out;
}

// One input file, read once: raw bytes for the provenance digest plus the
// parsed table.
struct InputFile {
  std::string path;
  std::string bytes;
  CsvTable table;
};

InputFile load_csv(const std::string& path) {
  InputFile f;
  f.path = path;
  f.bytes = read_text_file(path);
  f.table = parse_csv_text(f.bytes, path);
  return f;
}

json input_record(const InputFile& f) {
  return json{{"path", f.path}, {"fnv1a64", hex64(fnv1a64(f.bytes))}};
}

bool is_micro_reserved(std::string_view name) {
  return name == "outcome" || name == "weight" || name == "included";
}

bool is_cell_reserved(std::string_view name) {
  return name == "count" || name == "mean" || name == "variance";
}

// Covariate schema shared by all inputs of one estimate run: variables are
// the sample's non-reserved columns, level sets are the union over every
// input, sorted lexicographically so row order never matters.
CovariateSchema union_schema(const CsvTable& sample, const CsvTable* population,
                             const CsvTable* reference, const CsvTable* margins) {
  std::vector<std::string> vars;
  for (const auto& name : sample.header) {
    if (!is_micro_reserved(name)) vars.push_back(name);
  }
  if (vars.empty()) throw data_error("sample has no covariate columns");
  std::vector<std::set<std::string>> levels(vars.size());

  const auto harvest = [&](const CsvTable& t, bool cell_table, std::string_view what) {
    for (std::size_t v = 0; v < vars.size(); ++v) {
      const auto col = t.column(vars[v]);
      if (!col) {
        throw data_error(std::string(what) + " is missing covariate column '" + vars[v] + "'");
      }
      for (const auto& row : t.rows) levels[v].insert(row[*col]);
    }
    for (const auto& name : t.header) {
      if (cell_table ? is_cell_reserved(name) : is_micro_reserved(name)) continue;
      if (std::find(vars.begin(), vars.end(), name) == vars.end()) {
        throw data_error(std::string(what) + " has unknown column '" + name + "'");
      }
    }
  };
  harvest(sample, false, "sample");
  if (population) harvest(*population, true, "population");
  if (reference) harvest(*reference, false, "reference");
  if (margins) {
    const auto var_col = margins->require_column("variable", "margins");
    const auto level_col = margins->require_column("level", "margins");
    margins->require_column("total", "margins");
    for (const auto& row : margins->rows) {
      const auto it = std::find(vars.begin(), vars.end(), row[var_col]);
      if (it == vars.end()) {
        throw data_error("margins reference unknown variable '" + row[var_col] + "'");
      }
      levels[static_cast<std::size_t>(it - vars.begin())].insert(row[level_col]);
    }
  }

  CovariateSchema schema;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    if (levels[v].empty()) {
      throw data_error("covariate '" + vars[v] + "' has no observed levels");
    }
    schema.variables.push_back({vars[v], {levels[v].begin(), levels[v].end()}});
  }
  schema.validate();
  return schema;
}

// Margin targets grouped by variable, validated for completeness and a
// consistent grand total.
struct MarginSet {
  std::vector<RakingMargin> margins;  // schema variable order
  std::vector<std::size_t> vars;      // schema index per margin
  double total = 0.0;
};

MarginSet parse_margins(const CsvTable& t, const CovariateSchema& schema) {
  const auto var_col = t.require_column("variable", "margins");
  const auto level_col = t.require_column("level", "margins");
  const auto total_col = t.require_column("total", "margins");
  std::vector<std::vector<std::optional<double>>> got(schema.n_vars());
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    got[v].resize(schema.variables[v].levels.size());
  }
  for (const auto& row : t.rows) {
    const auto v = schema.var_index(row[var_col]);
    if (!v) throw data_error("margins reference unknown variable '" + row[var_col] + "'");
    const auto l = schema.level_index(*v, row[level_col]);
    if (!l) {
      throw data_error("margins: unknown level '" + row[level_col] + "' of variable '" +
                       row[var_col] + "'");
    }
    auto& slot = got[*v][static_cast<std::size_t>(*l)];
    if (slot) {
      throw data_error("margins: duplicate entry for " + row[var_col] + "=" + row[level_col]);
    }
    const double value = parse_double(row[total_col], "margins total");
    if (!(value >= 0.0)) {
      throw data_error("margins: negative total for " + row[var_col] + "=" + row[level_col]);
    }
    slot = value;
  }

  MarginSet out;
  for (std::size_t v = 0; v < schema.n_vars(); ++v) {
    bool any = false;
    for (const auto& slot : got[v]) any = any || slot.has_value();
    if (!any) continue;
    RakingMargin m;
    m.variable = schema.variables[v].name;
    double sum = 0.0;
    for (std::size_t l = 0; l < got[v].size(); ++l) {
      if (!got[v][l]) {
        throw data_error("margins: variable '" + m.variable + "' is missing level '" +
                         schema.variables[v].levels[l] + "'");
      }
      m.targets.push_back(*got[v][l]);
      sum += *got[v][l];
    }
    if (out.margins.empty()) {
      out.total = sum;
    } else if (std::abs(sum - out.total) > 1e-6 * std::max(1.0, std::abs(out.total))) {
      throw data_error("margins: variable '" + m.variable + "' totals " + format_double(sum) +
                       " but an earlier margin totals " + format_double(out.total));
    }
    out.margins.push_back(std::move(m));
    out.vars.push_back(v);
  }
  if (out.margins.empty()) throw data_error("margins file has no usable rows");
  return out;
}

Design margin_design(const CovariateSchema& schema, const MarginSet& ms) {
  ModelFormula f;
  for (std::size_t i = 0; i < ms.vars.size(); ++i) {
    f.terms.push_back(FixedTerm{{ms.vars[i]}});
    if (i) f.text += "+";
    f.text += schema.variables[ms.vars[i]].name;
  }
  return Design(schema, f);
}

Eigen::VectorXd margin_totals(const Design& design, const CovariateSchema& schema,
                              const MarginSet& ms) {
  std::vector<double> t;
  t.push_back(ms.total);
  for (std::size_t i = 0; i < ms.margins.size(); ++i) {
    // Single-level variables contribute no dummy columns.
    if (schema.variables[ms.vars[i]].levels.size() < 2) continue;
    for (std::size_t l = 1; l < ms.margins[i].targets.size(); ++l) {
      t.push_back(ms.margins[i].targets[l]);
    }
  }
  if (t.size() != design.n_columns()) {
    throw data_error("margin totals do not align with the calibration design");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
  return v;
}

void attach_jackknife(std::vector<EstimateSummary>& estimates, const JackknifeResult& jk) {
  if (jk.se.size() != estimates.size()) {
    throw numeric_error("jackknife returned " + std::to_string(jk.se.size()) +
                        " components for " + std::to_string(estimates.size()) + " estimates");
  }
  for (std::size_t g = 0; g < estimates.size(); ++g) {
    estimates[g].se = jk.se[g];
    estimates[g].ci_low = estimates[g].estimate - kZ975 * estimates[g].se;
    estimates[g].ci_high = estimates[g].estimate + kZ975 * estimates[g].se;
  }
}

CsvTable estimates_csv(const std::vector<EstimateSummary>& estimates) {
  CsvTable out;
  out.header = {"method", "group", "estimate", "se", "ci_low", "ci_high"};
  for (const auto& e : estimates) {
    out.rows.push_back({e.method, e.group, format_double(e.estimate), format_double(e.se),
                        format_double(e.ci_low), format_double(e.ci_high)});
  }
  return out;
}

void write_provenance(const std::string& out_dir, std::string_view subcommand,
                      const json& flags, const json& inputs, const json& results) {
  json prov;
  prov["subcommand"] = std::string(subcommand);
  prov["version"] = std::string(kVersion);
  prov["flags"] = flags;
  prov["config_hash"] = hex64(fnv1a64(flags.dump()));
  prov["inputs"] = inputs;
  prov["results"] = results;
  const auto path = std::filesystem::path(out_dir) / "provenance.json";
  write_text_file(path.string(), prov.dump(2) + "\n");
}

struct EstimateArgs {
  std::string method;
  std::string variant;
  std::string sample_path;
  std::string population_path;
  std::string reference_path;
  std::string margins_path;
  std::string outcome_model;
  std::string group_by;
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  double trim = 0.0;
  int jackknife_groups = 20;
  int wfpbb_populations = 100;
  int psi_digits = 1;
  int chains = 2;
  int iterations = 2000;
  int warmup = 1000;
  int threads = 1;
};

int cmd_estimate(const EstimateArgs& args) {
  std::string method = args.method;
  if (!args.variant.empty()) {
    method = "MRP-" + std::string(to_string(parse_variant(args.variant)));
  }
  const auto& roster = all_sim_methods();
  if (std::find(roster.begin(), roster.end(), method) == roster.end()) {
    throw data_error("unknown method '" + method + "'");
  }
  const InputFile sample_file = load_csv(args.sample_path);
  std::optional<InputFile> population_file;
  std::optional<InputFile> reference_file;
  std::optional<InputFile> margins_file;
  if (!args.population_path.empty()) population_file = load_csv(args.population_path);
  if (!args.reference_path.empty()) reference_file = load_csv(args.reference_path);
  if (!args.margins_path.empty()) margins_file = load_csv(args.margins_path);

  const CovariateSchema schema =
      union_schema(sample_file.table, population_file ? &population_file->table : nullptr,
                   reference_file ? &reference_file->table : nullptr,
                   margins_file ? &margins_file->table : nullptr);

  const Microdata sample = Microdata::from_csv_table(sample_file.table, args.sample_path, schema);
  std::optional<Microdata> reference;
  if (reference_file) {
    reference = Microdata::from_csv_table(reference_file->table, args.reference_path, schema);
    if (!reference->has_weight_column()) {
      throw data_error("reference microdata needs a weight column");
    }
  }
  std::optional<CellTable> population;
  if (population_file) {
    population = read_cell_table_csv(args.population_path, CellRole::population, schema);
  }
  std::optional<MarginSet> margins;
  if (margins_file) margins = parse_margins(margins_file->table, schema);

  const Grouping grouping = args.group_by.empty()
                                ? Grouping::overall()
                                : Grouping::overall_and_levels(schema, args.group_by);
  const std::optional<double> trim =
      args.trim > 0.0 ? std::optional<double>(args.trim) : std::nullopt;

  const auto require_population = [&]() -> const CellTable& {
    if (!population) throw data_error("method " + method + " needs --population");
    return *population;
  };
  const auto require_reference = [&]() -> const Microdata& {
    if (!reference) throw data_error("method " + method + " needs --reference");
    return *reference;
  };
  const auto base_weights = [&](const Microdata& data) {
    WeightVector base;
    if (sample.has_weight_column()) {
      base.values.resize(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) base.values[i] = data.weight(i);
      return base;
    }
    double total = 0.0;
    if (population) {
      total = population->total_count();
    } else if (margins) {
      total = margins->total;
    }
    if (!(total > 0.0)) {
      throw data_error("method " + method + " needs --population or --margins for base weights");
    }
    base.values.assign(data.size(), total / static_cast<double>(data.size()));
    return base;
  };

  std::vector<EstimateSummary> estimates;
  json results = json::object();

  if (method == "UnW") {
    estimates = unweighted_mean(build_cell_table(sample, CellRole::sample), grouping);
  } else if (method == "PS") {
    std::vector<double> uncovered;
    estimates = poststratified_mean(build_cell_table(sample, CellRole::sample),
                                    require_population(), grouping, &uncovered);
    results["uncovered_mass"] = uncovered;
  } else if (method == "IPW" || method == "DR") {
    const Microdata& ref = require_reference();
    const ModelFormula incl_model = main_effects_formula(schema);
    const ModelFormula dr_formula = args.outcome_model.empty()
                                        ? main_effects_formula(schema)
                                        : parse_formula(args.outcome_model, schema);
    const Design dr_design(schema, dr_formula);
    const bool is_dr = method == "DR";
    if (is_dr) require_population();

    const PropensityFit fit = fit_inclusion_model(concat_for_inclusion(sample, ref), incl_model);
    const std::vector<double> props(
        fit.fitted.begin(), fit.fitted.begin() + static_cast<std::ptrdiff_t>(sample.size()));
    estimates = is_dr ? dr_mean(sample, dr_design, *population, props, trim, grouping)
                      : ipw_mean(sample, props, grouping, trim);

    const std::size_t n_s = sample.size();
    const auto replicate = [&](const std::vector<int>& keep) {
      std::vector<int> s_keep;
      std::vector<int> r_keep;
      for (int u : keep) {
        if (static_cast<std::size_t>(u) < n_s) {
          s_keep.push_back(u);
        } else {
          r_keep.push_back(u - static_cast<int>(n_s));
        }
      }
      const Microdata s_sub = sample.subset(s_keep);
      const Microdata r_sub = ref.subset(r_keep);
      const PropensityFit f = fit_inclusion_model(concat_for_inclusion(s_sub, r_sub), incl_model);
      const std::vector<double> p(
          f.fitted.begin(), f.fitted.begin() + static_cast<std::ptrdiff_t>(s_keep.size()));
      const auto est = is_dr ? dr_mean(s_sub, dr_design, *population, p, trim, grouping)
                             : ipw_mean(s_sub, p, grouping, trim);
      std::vector<double> components;
      for (const auto& e : est) components.push_back(e.estimate);
      return components;
    };
    const JackknifeResult jk = jackknife_se(sample.size() + ref.size(), args.jackknife_groups,
                                            derive_seed(args.seed, 0xC0), replicate);
    attach_jackknife(estimates, jk);
    results["jackknife_failed_replicates"] = jk.failed_replicates.size();
  } else if (method == "GREG" || method == "Raking") {
    if (!margins && !population) {
      throw data_error("method " + method + " needs --margins or --population");
    }
    const bool is_greg = method == "GREG";
    const Design design = margins ? margin_design(schema, *margins)
                                  : Design(schema, main_effects_formula(schema));
    Eigen::VectorXd totals;
    std::vector<RakingMargin> rake_margins;
    if (margins) {
      totals = margin_totals(design, schema, *margins);
      rake_margins = margins->margins;
    } else {
      totals = design_totals(design, *population);
      for (std::size_t v = 0; v < schema.n_vars(); ++v) {
        RakingMargin m;
        m.variable = schema.variables[v].name;
        m.targets.assign(schema.variables[v].levels.size(), 0.0);
        for (const auto& row : population->rows) {
          m.targets[static_cast<std::size_t>(row.key.levels[v])] += row.count;
        }
        rake_margins.push_back(std::move(m));
      }
    }
    const WeightVector base = base_weights(sample);
    estimates = is_greg
                    ? greg_mean(sample, design, totals, base, grouping)
                    : weighted_mean(sample, rake_weights(sample, base, rake_margins), grouping,
                                    "Raking");
    const double base_total = base.sum();
    const bool unit_weights = sample.has_weight_column();
    const auto replicate = [&](const std::vector<int>& keep) {
      const Microdata sub = sample.subset(keep);
      WeightVector b;
      if (unit_weights) {
        b.values.resize(sub.size());
        for (std::size_t i = 0; i < sub.size(); ++i) b.values[i] = sub.weight(i);
      } else {
        b.values.assign(sub.size(), base_total / static_cast<double>(sub.size()));
      }
      const auto est = is_greg
                           ? greg_mean(sub, design, totals, b, grouping)
                           : weighted_mean(sub, rake_weights(sub, b, rake_margins), grouping,
                                           "Raking");
      std::vector<double> components;
      for (const auto& e : est) components.push_back(e.estimate);
      return components;
    };
    const JackknifeResult jk = jackknife_se(sample.size(), args.jackknife_groups,
                                            derive_seed(args.seed, 0xC1), replicate);
    attach_jackknife(estimates, jk);
    results["jackknife_failed_replicates"] = jk.failed_replicates.size();
  } else {
    const MrpVariant variant = parse_variant(method.substr(4));
    if (args.outcome_model.empty()) {
      throw data_error("MRP methods need --outcome-model");
    }
    OutcomeModelSpec spec;
    spec.formula = parse_formula(args.outcome_model, schema);
    McmcConfig mc;
    mc.chains = args.chains;
    mc.iterations = args.iterations;
    mc.warmup = args.warmup;
    mc.threads = args.threads;
    mc.seed = args.seed;
    MrpOptions opts;
    opts.wfpbb_populations = args.wfpbb_populations;
    opts.psi_digits = args.psi_digits;

    const Microdata* ref = nullptr;
    if (variant == MrpVariant::R || variant == MrpVariant::INT) ref = &require_reference();
    CellTable pop_cells;
    if (variant == MrpVariant::R && !population) {
      pop_cells.schema = schema;  // counts unknown, estimated from the reference
      pop_cells.role = CellRole::population;
    } else {
      pop_cells = require_population();
    }
    const MrpResult res = mrp_estimate(variant, sample, pop_cells, ref, spec, mc, grouping, opts);
    estimates = res.estimates;
    results["max_rhat"] = res.max_rhat;
    results["max_coef_prior_ratio"] = res.max_coef_prior_ratio;
    results["uncovered_mass"] = res.uncovered_mass;
    results["wfpbb_clamped"] = res.wfpbb_clamped;
    results["notes"] = res.notes;
  }

  std::filesystem::create_directories(args.out_dir);
  write_csv_file((std::filesystem::path(args.out_dir) / "estimates.csv").string(),
                 estimates_csv(estimates));

  json flags;
  flags["method"] = method;
  flags["sample"] = args.sample_path;
  flags["population"] = args.population_path;
  flags["reference"] = args.reference_path;
  flags["margins"] = args.margins_path;
  flags["outcome_model"] = args.outcome_model;
  flags["group_by"] = args.group_by;
  flags["seed"] = args.seed;
  flags["trim"] = args.trim;
  flags["jackknife_groups"] = args.jackknife_groups;
  flags["wfpbb_populations"] = args.wfpbb_populations;
  flags["psi_digits"] = args.psi_digits;
  flags["chains"] = args.chains;
  flags["iterations"] = args.iterations;
  flags["warmup"] = args.warmup;
  flags["threads"] = args.threads;
  json inputs;
  inputs["sample"] = input_record(sample_file);
  if (population_file) inputs["population"] = input_record(*population_file);
  if (reference_file) inputs["reference"] = input_record(*reference_file);
  if (margins_file) inputs["margins"] = input_record(*margins_file);
  write_provenance(args.out_dir, "estimate", flags, inputs, results);
  return 0;
}

struct SynthArgs {
  std::string reference_path;
  long long N = 0;
  int L = 100;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

int cmd_synthpop(const SynthArgs& args) {
  const InputFile ref_file = load_csv(args.reference_path);
  const Microdata ref =
      Microdata::from_csv_table(ref_file.table, args.reference_path, std::nullopt);
  if (ref.size() == 0) throw data_error("synthpop: reference file has no units");
  if (!ref.has_weight_column()) {
    throw data_error("synthpop: reference microdata needs a weight column");
  }
  long long N = args.N;
  if (N <= 0) {
    double total = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) total += ref.weight(i);
    N = std::llround(total);
  }
  if (N < static_cast<long long>(ref.size())) {
    throw data_error("synthpop: population size " + std::to_string(N) +
                     " is smaller than the sample (" + std::to_string(ref.size()) + ")");
  }
  if (args.L < 1) throw data_error("synthpop: L must be positive");

  Rng rng(args.seed);
  std::vector<SyntheticPopulation> populations;
  const auto tables = estimate_pop_cells(ref, N, args.L, rng, &populations);

  CsvTable out;
  out.header.push_back("replicate");
  for (const auto& var : ref.schema().variables) out.header.push_back(var.name);
  out.header.push_back("count");
  for (std::size_t l = 0; l < tables.size(); ++l) {
    for (const auto& row : tables[l].rows) {
      std::vector<std::string> fields;
      fields.push_back(std::to_string(l + 1));
      for (std::size_t v = 0; v < ref.schema().n_vars(); ++v) {
        fields.push_back(
            ref.schema().variables[v].levels[static_cast<std::size_t>(row.key.levels[v])]);
      }
      fields.push_back(format_double(row.count));
      out.rows.push_back(std::move(fields));
    }
  }
  std::filesystem::create_directories(args.out_dir);
  write_csv_file((std::filesystem::path(args.out_dir) / "synthetic_cells.csv").string(), out);

  long long clamped = 0;
  double max_drift = 0.0;
  for (const auto& p : populations) {
    clamped += p.clamped_units;
    max_drift = std::max(max_drift, p.max_prob_sum_error);
  }
  json flags;
  flags["reference"] = args.reference_path;
  flags["N"] = N;
  flags["L"] = args.L;
  flags["seed"] = args.seed;
  json inputs;
  inputs["reference"] = input_record(ref_file);
  json results;
  results["clamped_units"] = clamped;
  results["max_prob_sum_error"] = max_drift;
  write_provenance(args.out_dir, "synthpop", flags, inputs, results);
  return 0;
}

struct DiagnoseArgs {
  std::string input_path;
  double sigma_theta = 0.0;
  double n = 0.0;
  std::string out_dir = ".";
};

int cmd_diagnose(const DiagnoseArgs& args) {
  const InputFile in = load_csv(args.input_path);
  const PopulationSpec spec = read_population_spec_csv(in.table);
  const BiasRecord bias = analytic_bias(spec, args.sigma_theta, args.n);
  const VarianceRecord var = expected_variances(spec, args.sigma_theta, args.n);

  CsvTable out;
  out.header = {"A",        "B",        "bias_unw",        "bias_ps",        "bias_mrp",
                "approx_bias_unw", "approx_bias_ps", "var_unw", "var_ps", "var_mrp"};
  out.rows.push_back({format_double(bias.A), format_double(bias.B), format_double(bias.bias_unw),
                      format_double(bias.bias_ps), format_double(bias.bias_mrp),
                      format_double(bias.approx_bias_unw), format_double(bias.approx_bias_ps),
                      format_double(var.var_unw), format_double(var.var_ps),
                      format_double(var.var_mrp)});
  std::filesystem::create_directories(args.out_dir);
  write_csv_file((std::filesystem::path(args.out_dir) / "diagnostics.csv").string(), out);

  json flags;
  flags["input"] = args.input_path;
  flags["sigma_theta"] = args.sigma_theta;
  flags["n"] = args.n;
  json inputs;
  inputs["input"] = input_record(in);
  json results;
  results["cells"] = spec.cells.size();
  results["total"] = spec.total();
  results["psi_bar"] = spec.psi_bar();
  results["population_mean"] = spec.population_mean();
  results["respondent_mean"] = spec.respondent_mean();
  write_provenance(args.out_dir, "diagnose", flags, inputs, results);
  return 0;
}

struct SimulateArgs {
  std::string config_path;
  std::string methods;
  int reps = -1;
  long long seed = -1;
  std::string out_dir = ".";
};

int cmd_simulate(const SimulateArgs& args) {
  SimConfig cfg;
  std::optional<std::string> config_bytes;
  if (!args.config_path.empty()) {
    config_bytes = read_text_file(args.config_path);
    cfg = parse_sim_config(*config_bytes);
  }
  if (!args.methods.empty()) cfg.methods = split_commas(args.methods);
  if (args.reps >= 0) cfg.replications = args.reps;
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  cfg.validate();

  const SimReport report = run_study(cfg);
  std::filesystem::create_directories(args.out_dir);
  const auto dir = std::filesystem::path(args.out_dir);
  write_csv_file((dir / "report.csv").string(), report_csv(report));
  write_csv_file((dir / "replications.csv").string(), replication_csv(report));
  write_text_file((dir / "provenance.txt").string(), provenance_text(cfg, report));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Finite-population estimation from nonprobability samples"};
  app.require_subcommand(1);

  EstimateArgs est_args;
  SynthArgs synth_args;
  DiagnoseArgs diag_args;
  SimulateArgs sim_args;

  CLI::App* est = app.add_subcommand("estimate", "Run one estimator over sample data");
  auto* pick = est->add_option_group("estimator", "what to run");
  pick->add_option("--method", est_args.method,
                   "One of: UnW, PS, IPW, GREG, Raking, DR, MRP-S, MRP-P, MRP-R, MRP-INT");
  pick->add_option("--variant", est_args.variant, "MRP variant shorthand: S, P, R, INT");
  pick->require_option(1);
  est->add_option("--sample", est_args.sample_path, "Sample microdata CSV")->required();
  est->add_option("--population", est_args.population_path, "Population cell-count CSV");
  est->add_option("--reference", est_args.reference_path,
                  "Reference microdata CSV (weight column required)");
  est->add_option("--margins", est_args.margins_path, "Margin totals CSV: variable,level,total");
  est->add_option("--outcome-model", est_args.outcome_model,
                  "Formula, e.g. \"age+race+edu+inc\" (MRP also accepts psi and (1|psi))");
  est->add_option("--group-by", est_args.group_by, "Report subgroup means by this variable");
  est->add_option("--out-dir", est_args.out_dir, "Output directory")->capture_default_str();
  est->add_option("--seed", est_args.seed, "Master seed")->capture_default_str();
  est->add_option("--trim", est_args.trim, "Winsorize IPW weights at this upper quantile");
  est->add_option("--jackknife-groups", est_args.jackknife_groups,
                  "Delete-a-group jackknife groups")
      ->capture_default_str();
  est->add_option("--wfpbb-populations", est_args.wfpbb_populations,
                  "Synthetic populations for MRP-R")
      ->capture_default_str();
  est->add_option("--psi-digits", est_args.psi_digits,
                  "Rounding digits for the inclusion-probability groups")
      ->capture_default_str();
  est->add_option("--chains", est_args.chains, "MCMC chains")->capture_default_str();
  est->add_option("--iterations", est_args.iterations, "MCMC iterations per chain")
      ->capture_default_str();
  est->add_option("--warmup", est_args.warmup, "MCMC warmup iterations")->capture_default_str();
  est->add_option("--threads", est_args.threads, "Worker threads")->capture_default_str();

  CLI::App* synth = app.add_subcommand(
      "synthpop", "Expand a weighted reference sample into synthetic population cell counts");
  synth->add_option("--reference", synth_args.reference_path,
                    "Reference microdata CSV (weight column required)")
      ->required();
  synth->add_option("--N", synth_args.N, "Population size (default: rounded weight total)");
  synth->add_option("--L", synth_args.L, "Bootstrap replicates")->capture_default_str();
  synth->add_option("--seed", synth_args.seed, "Master seed")->capture_default_str();
  synth->add_option("--out-dir", synth_args.out_dir, "Output directory")->capture_default_str();

  CLI::App* diag =
      app.add_subcommand("diagnose", "Analytic selection-bias and variance diagnostics");
  diag->add_option("--input", diag_args.input_path,
                   "Population spec CSV: cell vars..., N, psi, meanR, meanM, sd")
      ->required();
  diag->add_option("--sigma-theta", diag_args.sigma_theta, "Cell-mean prior sd")->required();
  diag->add_option("--n", diag_args.n, "Expected total sample size")->required();
  diag->add_option("--out-dir", diag_args.out_dir, "Output directory")->capture_default_str();

  CLI::App* sim = app.add_subcommand("simulate", "Replicate the simulation study");
  sim->add_option("--config", sim_args.config_path, "key = value config file");
  sim->add_option("--methods", sim_args.methods, "Comma-separated method subset");
  sim->add_option("--reps", sim_args.reps, "Replication count");
  sim->add_option("--seed", sim_args.seed, "Master seed");
  sim->add_option("--out-dir", sim_args.out_dir, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand(est)) return cmd_estimate(est_args);
    if (app.got_subcommand(synth)) return cmd_synthpop(synth_args);
    if (app.got_subcommand(diag)) return cmd_diagnose(diag_args);
    if (app.got_subcommand(sim)) return cmd_simulate(sim_args);
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

}  // namespace popstrat
