// reciv: simulate panels, build instruments, estimate demand, run Monte
// Carlo experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "reciv/error.hpp"
#include "reciv/harness.hpp"
#include "reciv/io.hpp"
#include "reciv/nestedlogit.hpp"

using namespace reciv;
using nlohmann::json;

namespace {

struct SimulateArgs {
  std::string model = "mixed";
  int regions = 100;
  int products = 15;
  std::uint64_t seed = 1;
  double shock_sd = 0.2;
  std::string scenario = "baseline";
  int common = 0;
  double bliss_penalty = 3.0;
  int dgp_draws = 1000;
  std::vector<double> sigma{4.0, 4.0};
  std::optional<double> alpha;
  double nest_sigma = 0.5;
  int nests = 3;
  std::string out = "panel.csv";
};

struct InstrumentArgs {
  std::string panel;
  std::string kind = "ssiv";
  int permutations = 20;
  std::uint64_t seed = 1;
  std::string scope = "all";
  double alpha_check = -1.0;
  std::vector<double> sigma_check;
  double pi_check = std::numeric_limits<double>::quiet_NaN();
  int draws = 250;
  int period = 2;
  std::string out = "-";
};

struct EstimateArgs {
  std::string panel;
  std::string model = "mixed";
  std::vector<std::string> estimators{"reciv-ssiv"};
  std::string mode = "cu";
  std::string cluster = "market";
  bool no_se = false;
  int draws = 250;
  int grid_points = 50;
  int permutations = 20;
  std::uint64_t seed = 1;
  std::vector<double> start;
  std::string out = "-";
};

struct MonteCarloArgs {
  std::string experiment;
  int sims = 0;
  std::uint64_t seed = 1;
  std::string scale = "full";
  std::string out;
  int regions = 0;
  std::vector<std::string> estimators;
  std::string mode = "cu";
  std::vector<double> grid;
  int workers = 0;
  int grid_points = 50;
  int permutations = 20;
  int draws = 250;
  bool no_se = false;
  bool quiet = false;
};

// Output stream for "-" (stdout) or a file.
class Output {
 public:
  explicit Output(const std::string& path, bool append = false) {
    if (path != "-") {
      file_.open(path, append ? std::ios::app : std::ios::trunc);
      if (!file_) throw DomainError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

std::string json_to_token(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ",") + json_to_token(e);
    return s;
  }
  return v.dump();
}

// Config keys become defaults of the chosen subcommand's options, so that
// command-line flags still override them. Keys under a subcommand's name
// apply to that subcommand only.
void apply_config(const std::string& path, CLI::App& app, CLI::App& sub) {
  std::ifstream f(path);
  if (!f) throw DomainError("cannot read config " + path);
  json config;
  try {
    config = json::parse(f);
  } catch (const json::exception& e) {
    throw DomainError("config " + path + ": " + e.what());
  }
  if (!config.is_object()) throw DomainError("config " + path + ": expected an object");

  std::set<std::string> known;
  for (const CLI::App* s : app.get_subcommands({})) {
    for (const CLI::Option* o : s->get_options()) {
      for (const auto& name : o->get_lnames()) known.insert(name);
    }
  }
  auto set_key = [&](const std::string& key, const json& value, bool strict) {
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr) {
      if (strict || known.count(key) == 0) throw DomainError("config " + path + ": unknown key '" + key + "'");
      return;
    }
    opt->run_callback_for_default();
    opt->default_val(json_to_token(value));
  };
  for (const auto& [key, value] : config.items()) {
    if (value.is_object()) {
      if (app.get_subcommand_no_throw(key) == nullptr) throw DomainError("config " + path + ": unknown section '" + key + "'");
      if (key != sub.get_name()) continue;
      for (const auto& [k, v] : value.items()) set_key(k, v, true);
    } else {
      set_key(key, value, false);
    }
  }
}

std::string sidecar_path(const std::string& csv) {
  std::filesystem::path p(csv);
  p.replace_extension(".truth.json");
  return p.string();
}

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

int run_simulate(const SimulateArgs& a) {
  if (a.model == "nested") {
    NestedDgpConfig c;
    c.n_markets = a.regions;
    c.seed = a.seed;
    c.shock_sd = a.shock_sd;
    if (a.alpha) c.alpha = *a.alpha;
    c.sigma = a.nest_sigma;
    c.n_nests = a.nests;
    const NestedPanel panel = simulate_nested_panel(c);
    std::vector<NestedMarket> all = panel.period1;
    all.insert(all.end(), panel.period2.begin(), panel.period2.end());
    Output out(a.out);
    write_nested_csv(out.stream(), all);
    if (a.out != "-") {
      std::ofstream(sidecar_path(a.out)) << json{{"model", "nested"}, {"n_markets", c.n_markets}, {"alpha", c.alpha},
                                                 {"sigma", c.sigma}, {"n_nests", c.n_nests},
                                                 {"shock_sd", c.shock_sd}, {"seed", c.seed}}
                                                .dump(2)
                                         << '\n';
    }
    return 0;
  }
  DgpConfig c;
  c.n_regions = a.regions;
  c.n_products = a.products;
  c.seed = a.seed;
  c.shock_sd = a.shock_sd;
  c.scenario = scenario_from_string(a.scenario);
  c.common_products = a.common;
  c.bliss_penalty = a.bliss_penalty;
  c.dgp_draws = a.dgp_draws;
  c.sigma_true = to_vec(a.sigma);
  c.L1 = static_cast<int>(a.sigma.size());
  if (a.alpha) c.alpha_true = *a.alpha;
  if (c.L1 != 2) {
    c.beta = Vec::Constant(c.L1 + 1, 2.0);
    c.beta(0) = 35.0;
    c.gamma = Vec::Constant(c.L1 + 1, 1.0);
    c.gamma(0) = 5.0;
  }
  c.validate();
  const SimulatedPanel sp = simulate_panel(c);
  Output out(a.out);
  write_panel_csv(out.stream(), sp.panel);
  if (a.out != "-") std::ofstream(sidecar_path(a.out)) << dgp_config_to_json(c).dump(2) << '\n';
  std::cerr << sp.panel.markets.size() << " markets, " << sp.panel.dropped.size() << " dropped\n";
  return 0;
}

int run_instruments(const InstrumentArgs& a) {
  const Panel panel = read_panel_csv(a.panel);
  const Eigen::Index L1 = panel.n_random_coefficients();
  InstrumentOptions o;
  o.kind = instrument_kind_from_string(a.kind);
  o.period = a.period;
  o.check.alpha = a.alpha_check;
  o.check.sigma = a.sigma_check.empty() ? Vec::Ones(L1) : to_vec(a.sigma_check);
  o.pi_check = a.pi_check;
  o.permutations = a.permutations;
  o.seed = a.seed;
  if (a.scope == "all") {
    o.scope = PermutationScope::across_all;
  } else if (a.scope == "market") {
    o.scope = PermutationScope::within_market;
  } else {
    throw DomainError("scope must be 'all' or 'market'");
  }
  const InstrumentSet set = build_instruments(panel, scrambled_halton_draws(a.draws, static_cast<int>(L1)), o);
  Output out(a.out);
  write_instruments_csv(out.stream(), panel, set);
  return 0;
}

int run_estimate(const EstimateArgs& a) {
  Output out(a.out, true);
  if (a.model == "nested") {
    std::ifstream f(a.panel);
    if (!f) throw DomainError("cannot read " + a.panel);
    std::vector<NestedMarket> post;
    for (auto& m : read_nested_csv(f)) {
      if (m.period == 2) post.push_back(std::move(m));
    }
    const NestedIvResult r = nested_two_stage(post);
    std::vector<double> beta(r.beta.data(), r.beta.data() + r.beta.size());
    out.stream() << json{{"model", "nested"}, {"alpha", r.alpha}, {"sigma", r.sigma}, {"beta", beta},
                         {"observations", r.observations}}
                        .dump()
                 << '\n';
    return 0;
  }
  if (a.model != "mixed") throw DomainError("model must be 'mixed' or 'nested'");
  const Panel panel = read_panel_csv(a.panel);
  const Eigen::Index L1 = panel.n_random_coefficients();
  const ConsumerDraws draws = scrambled_halton_draws(a.draws, static_cast<int>(L1));
  EstimatorOptions o;
  o.mode = recentered_mode_from_string(a.mode);
  o.clustering = clustering_from_string(a.cluster);
  o.standard_errors = !a.no_se;
  o.grid_points = a.grid_points;
  o.permutations = a.permutations;
  o.permutation_seed = a.seed;
  if (!a.start.empty()) {
    if (static_cast<Eigen::Index>(a.start.size()) != L1 + 1) {
      throw DomainError("--start needs alpha followed by " + std::to_string(L1) + " sigma values");
    }
    o.start = Theta{a.start[0], to_vec(std::vector<double>(a.start.begin() + 1, a.start.end()))};
  }
  std::vector<EstimatorKind> kinds;
  for (const auto& name : a.estimators) kinds.push_back(estimator_kind_from_string(name));
  InversionCache cache(panel, draws, o.inversion);
  int failures = 0;
  for (EstimatorKind k : kinds) {
    try {
      out.stream() << estimation_result_to_json(estimate(panel, draws, k, o, &cache)).dump() << '\n';
    } catch (const DomainError&) {
      throw;
    } catch (const Error& e) {
      ++failures;
      out.stream() << json{{"estimator", to_string(k)}, {"error", e.what()}}.dump() << '\n';
    }
  }
  return failures == 0 ? 0 : 1;
}

int run_montecarlo(const MonteCarloArgs& a) {
  const Experiment e = experiment_from_string(a.experiment);
  ExperimentSpec spec = experiment_defaults(e, scale_from_string(a.scale));
  if (a.sims > 0) spec.n_sims = a.sims;
  if (a.regions > 0) spec.dgp.n_regions = a.regions;
  spec.master_seed = a.seed;
  spec.output_dir = a.out;
  spec.workers = a.workers;
  spec.grid = a.grid;
  spec.estimation_draws = a.draws;
  for (const auto& name : a.estimators) spec.estimators.push_back(estimator_kind_from_string(name));
  spec.options.mode = recentered_mode_from_string(a.mode);
  spec.options.grid_points = a.grid_points;
  spec.options.permutations = a.permutations;
  spec.options.standard_errors = !a.no_se;
  spec.validate();

  ProgressFn progress;
  if (!a.quiet) {
    progress = [](int done, int total) { std::cerr << "\r" << done << "/" << total << std::flush; };
  }
  const ExperimentResult r = run_experiment(spec, progress);
  if (!a.quiet) std::cerr << '\n';

  std::cout << std::left << std::setw(10) << point_label(e).substr(0, 9) << std::setw(15) << "estimator"
            << std::setw(8) << "param" << std::right << std::setw(10) << "truth" << std::setw(10) << "p25"
            << std::setw(10) << "median" << std::setw(10) << "p75" << std::setw(7) << "conv" << '\n';
  for (const SummaryCell& c : r.summary.cells) {
    std::cout << std::left << std::setw(10) << c.point_value << std::setw(15) << to_string(c.estimator)
              << std::setw(8) << c.parameter << std::right << std::fixed << std::setprecision(3) << std::setw(10)
              << c.truth << std::setw(10) << c.percentiles[1] << std::setw(10) << c.percentiles[2] << std::setw(10)
              << c.percentiles[3] << std::setw(7) << c.n_converged << std::defaultfloat << '\n';
  }
  std::cout << "mean dropped markets per simulation: " << r.mean_dropped << "\nwrote " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recentered-instrument demand estimation"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file of option defaults (flags override)")->check(CLI::ExistingFile);

  SimulateArgs sa;
  CLI::App* sim = app.add_subcommand("simulate", "Simulate a two-period panel");
  sim->add_option("--model", sa.model, "mixed or nested")->check(CLI::IsMember({"mixed", "nested"}));
  sim->add_option("--regions", sa.regions, "Regions (markets per period)")->check(CLI::PositiveNumber);
  sim->add_option("--products", sa.products, "Products per market")->check(CLI::PositiveNumber);
  sim->add_option("--seed", sa.seed, "Master seed");
  sim->add_option("--shock-sd", sa.shock_sd, "Cost-shock standard deviation")->check(CLI::NonNegativeNumber);
  sim->add_option("--scenario", sa.scenario, "baseline, shock-sweep, common or bliss");
  sim->add_option("--common", sa.common, "Common products (scenario common)");
  sim->add_option("--bliss-penalty", sa.bliss_penalty, "Taste penalty (scenario bliss)");
  sim->add_option("--dgp-draws", sa.dgp_draws, "Consumer draws used for pricing and shares");
  sim->add_option("--sigma", sa.sigma, "Random-coefficient sds")->delimiter(',');
  sim->add_option("--alpha", sa.alpha, "Price coefficient (default: the model's own)");
  sim->add_option("--nest-sigma", sa.nest_sigma, "Nesting parameter (nested model)");
  sim->add_option("--nests", sa.nests, "Nests per market (nested model)");
  sim->add_option("--out", sa.out, "Panel CSV ('-' for stdout); the truth goes to <out>.truth.json");

  InstrumentArgs ia;
  CLI::App* ins = app.add_subcommand("instruments", "Build instruments for a panel");
  ins->add_option("--panel", ia.panel, "Panel CSV")->required()->check(CLI::ExistingFile);
  ins->add_option("--kind", ia.kind, "cost-shock, blp, gh-quad, gh-local, ssiv or fiv");
  ins->add_option("--permutations", ia.permutations, "Shock permutations (fiv)")->check(CLI::PositiveNumber);
  ins->add_option("--seed", ia.seed, "Permutation seed");
  ins->add_option("--scope", ia.scope, "Permutation scope: all or market");
  ins->add_option("--alpha-check", ia.alpha_check, "Price coefficient for recentered instruments");
  ins->add_option("--sigma-check", ia.sigma_check, "Random-coefficient sds for recentered instruments (default 1)")
      ->delimiter(',');
  ins->add_option("--pi-check", ia.pi_check, "Pass-through (default: estimated)");
  ins->add_option("--draws", ia.draws, "Halton draws")->check(CLI::PositiveNumber);
  ins->add_option("--period", ia.period, "Period to instrument");
  ins->add_option("--out", ia.out, "Instrument CSV ('-' for stdout)");

  EstimateArgs ea;
  CLI::App* est = app.add_subcommand("estimate", "Estimate demand on a panel; one JSON line per estimator");
  est->add_option("--panel", ea.panel, "Panel CSV")->required()->check(CLI::ExistingFile);
  est->add_option("--model", ea.model, "mixed or nested")->check(CLI::IsMember({"mixed", "nested"}));
  est->add_option("--estimator", ea.estimators, "char-blp, char-gh-quad, char-gh-local, reciv-ssiv, reciv-fiv")
      ->delimiter(',');
  est->add_option("--mode", ea.mode, "cu or iterative (recentered estimators)");
  est->add_option("--cluster", ea.cluster, "market or shock");
  est->add_flag("--no-se", ea.no_se, "Skip standard errors");
  est->add_option("--draws", ea.draws, "Halton draws")->check(CLI::PositiveNumber);
  est->add_option("--grid-points", ea.grid_points, "Starting-value grid size")->check(CLI::PositiveNumber);
  est->add_option("--permutations", ea.permutations, "Shock permutations (reciv-fiv)")->check(CLI::PositiveNumber);
  est->add_option("--seed", ea.seed, "Permutation seed");
  est->add_option("--start", ea.start, "Start at alpha,sigma1,... instead of the grid")->delimiter(',');
  est->add_option("--out", ea.out, "Append JSON lines here ('-' for stdout)");

  MonteCarloArgs ma;
  CLI::App* mc = app.add_subcommand("montecarlo", "Run a Monte Carlo experiment");
  mc->add_option("--experiment", ma.experiment, "baseline, shock-sweep, common-sweep or bliss")->required();
  mc->add_option("--sims", ma.sims, "Simulations (default from --scale)");
  mc->add_option("--seed", ma.seed, "Master seed");
  mc->add_option("--scale", ma.scale, "full (100 x 100) or desk (50 x 50)");
  mc->add_option("--out", ma.out, "Output directory")->required();
  mc->add_option("--regions", ma.regions, "Regions (default from --scale)");
  mc->add_option("--estimators", ma.estimators, "Estimators (default: all)")->delimiter(',');
  mc->add_option("--mode", ma.mode, "cu or iterative");
  mc->add_option("--grid", ma.grid, "Sweep points")->delimiter(',');
  mc->add_option("--workers", ma.workers, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
  mc->add_option("--grid-points", ma.grid_points, "Starting-value grid size")->check(CLI::PositiveNumber);
  mc->add_option("--permutations", ma.permutations, "Shock permutations (reciv-fiv)")->check(CLI::PositiveNumber);
  mc->add_option("--draws", ma.draws, "Halton draws for estimation")->check(CLI::PositiveNumber);
  mc->add_flag("--no-se", ma.no_se, "Skip standard errors");
  mc->add_flag("--quiet", ma.quiet, "No progress output");

  try {
    // Config defaults must be in place before the command line is parsed.
    for (int i = 1; i + 1 < argc; ++i) {
      if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
      if (std::string(argv[i]).rfind("--config=", 0) == 0) config_path = std::string(argv[i]).substr(9);
    }
    if (!config_path.empty()) {
      for (int i = 1; i < argc; ++i) {
        if (CLI::App* s = app.get_subcommand_no_throw(argv[i])) {
          apply_config(config_path, app, *s);
          break;
        }
      }
    }
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*sim) return run_simulate(sa);
    if (*ins) return run_instruments(ia);
    if (*est) return run_estimate(ea);
    if (*mc) return run_montecarlo(ma);
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
