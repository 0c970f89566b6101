#include "reciv/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "reciv/error.hpp"
#include "reciv/io.hpp"

namespace reciv {

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::baseline: return "baseline";
    case Experiment::shock_sweep: return "shock-sweep";
    case Experiment::common_sweep: return "common-sweep";
    case Experiment::bliss: return "bliss";
  }
  return "unknown";
}

Experiment experiment_from_string(const std::string& name) {
  if (name == "baseline") return Experiment::baseline;
  if (name == "shock-sweep" || name == "shock_sweep") return Experiment::shock_sweep;
  if (name == "common-sweep" || name == "common_sweep") return Experiment::common_sweep;
  if (name == "bliss") return Experiment::bliss;
  throw DomainError("unknown experiment '" + name + "'");
}

std::string to_string(Scale s) { return s == Scale::full ? "full" : "desk"; }

Scale scale_from_string(const std::string& name) {
  if (name == "full") return Scale::full;
  if (name == "desk") return Scale::desk;
  throw DomainError("unknown scale '" + name + "'");
}

std::vector<double> default_grid(Experiment e, const DgpConfig& base) {
  switch (e) {
    case Experiment::shock_sweep: return {0.1, 0.2, 0.3, 0.4};
    case Experiment::common_sweep: return {0, 5, 10, 15};
    case Experiment::baseline:
    case Experiment::bliss: return {base.shock_sd};
  }
  return {};
}

std::vector<EstimatorKind> all_estimators() {
  return {EstimatorKind::reciv_ssiv, EstimatorKind::reciv_fiv, EstimatorKind::char_gh_quadratic,
          EstimatorKind::char_gh_local, EstimatorKind::char_blp};
}

std::string point_label(Experiment e) {
  return e == Experiment::common_sweep ? "common_products" : "shock_sd";
}

std::vector<std::string> summary_parameters(const DgpConfig& config) {
  std::vector<std::string> out{"alpha"};
  for (int l = 1; l <= config.L1; ++l) out.push_back("sigma" + std::to_string(l));
  return out;
}

void ExperimentSpec::validate() const {
  if (n_sims < 1) throw DomainError("experiment: n_sims must be at least 1");
  if (workers < 0) throw DomainError("experiment: workers must be nonnegative");
  if (estimation_draws < 1) throw DomainError("experiment: estimation_draws must be positive");
  const auto grid_values = points();
  if (grid_values.empty()) throw DomainError("experiment: sweep grid is empty");
  if ((experiment == Experiment::baseline || experiment == Experiment::bliss) && grid_values.size() != 1) {
    throw DomainError("experiment: " + to_string(experiment) + " has a single point");
  }
  for (double v : grid_values) {
    if (!std::isfinite(v) || v < 0.0) throw DomainError("experiment: grid values must be finite and nonnegative");
    if (experiment == Experiment::common_sweep && v != std::floor(v)) {
      throw DomainError("experiment: common product counts must be integers");
    }
  }
  for (std::size_t p = 0; p < grid_values.size(); ++p) config_at(p, 0).validate();
  auto list = estimator_list();
  std::sort(list.begin(), list.end());
  if (std::adjacent_find(list.begin(), list.end()) != list.end()) {
    throw DomainError("experiment: duplicate estimator");
  }
}

std::vector<double> ExperimentSpec::points() const {
  return grid.empty() ? default_grid(experiment, dgp) : grid;
}

std::vector<EstimatorKind> ExperimentSpec::estimator_list() const {
  return estimators.empty() ? all_estimators() : estimators;
}

DgpConfig ExperimentSpec::config_at(std::size_t point, int sim) const {
  DgpConfig c = dgp;
  const double v = points().at(point);
  c.seed = simulation_seed(master_seed, sim);
  switch (experiment) {
    case Experiment::baseline:
      c.scenario = Scenario::baseline;
      c.shock_sd = v;
      break;
    case Experiment::shock_sweep:
      c.scenario = Scenario::shock_sweep;
      c.shock_sd = v;
      break;
    case Experiment::common_sweep:
      c.scenario = Scenario::common_products;
      c.common_products = static_cast<int>(v);
      break;
    case Experiment::bliss:
      c.scenario = Scenario::bliss_point;
      c.shock_sd = v;
      break;
  }
  return c;
}

ExperimentSpec experiment_defaults(Experiment e, Scale scale) {
  ExperimentSpec spec;
  spec.experiment = e;
  spec.n_sims = scale == Scale::full ? 100 : 50;
  spec.dgp.n_regions = scale == Scale::full ? 100 : 50;
  return spec;
}

std::uint64_t simulation_seed(std::uint64_t master_seed, int sim) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed & 0xffffffffu),
                    static_cast<std::uint32_t>(master_seed >> 32), static_cast<std::uint32_t>(sim)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (!(q >= 0.0 && q <= 100.0)) throw DomainError("percentile: q must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------------------
// Summary

const SummaryCell* SummaryTable::find(std::size_t point, EstimatorKind estimator, const std::string& parameter) const {
  for (const SummaryCell& c : cells) {
    if (c.point == point && c.estimator == estimator && c.parameter == parameter) return &c;
  }
  return nullptr;
}

namespace {

nlohmann::json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double parameter_value(const EstimationResult& r, std::size_t index) {
  if (index == 0) return r.theta_hat.alpha;
  const auto l = static_cast<Eigen::Index>(index - 1);
  return l < r.theta_hat.sigma.size() ? r.theta_hat.sigma(l) : std::numeric_limits<double>::quiet_NaN();
}

double parameter_se(const EstimationResult& r, std::size_t index) {
  if (!r.se || static_cast<Eigen::Index>(index) >= r.se->se.size()) return std::numeric_limits<double>::quiet_NaN();
  return r.se->se(static_cast<Eigen::Index>(index));
}

double parameter_truth(const DgpConfig& c, std::size_t index) {
  return index == 0 ? c.alpha_true : c.sigma_true(static_cast<Eigen::Index>(index - 1));
}

std::string clean(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

nlohmann::json SummaryTable::to_json() const {
  nlohmann::json j;
  j["experiment"] = to_string(experiment);
  j["point_label"] = point_label(experiment);
  j["points"] = points;
  j["n_sims"] = n_sims;
  nlohmann::json names = nlohmann::json::array();
  for (EstimatorKind k : estimators) names.push_back(to_string(k));
  j["estimators"] = names;
  nlohmann::json rows = nlohmann::json::array();
  for (const SummaryCell& c : cells) {
    nlohmann::json row{{"point", c.point_value},
                       {"estimator", to_string(c.estimator)},
                       {"parameter", c.parameter},
                       {"truth", c.truth},
                       {"mean", finite_or_null(c.mean)},
                       {"n_converged", c.n_converged},
                       {"n_failed", c.n_failed}};
    for (std::size_t i = 0; i < kSummaryPercentiles.size(); ++i) {
      row["p" + std::to_string(static_cast<int>(kSummaryPercentiles[i]))] = finite_or_null(c.percentiles[i]);
    }
    rows.push_back(std::move(row));
  }
  j["cells"] = rows;
  return j;
}

SummaryTable summarize(const ExperimentSpec& spec, const std::vector<SimulationRecord>& records) {
  SummaryTable t;
  t.experiment = spec.experiment;
  t.points = spec.points();
  t.estimators = spec.estimator_list();
  t.n_sims = spec.n_sims;
  const auto params = summary_parameters(spec.dgp);
  for (std::size_t p = 0; p < t.points.size(); ++p) {
    const DgpConfig truth = spec.config_at(p, 0);
    for (EstimatorKind k : t.estimators) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        std::vector<double> values;
        for (const SimulationRecord& r : records) {
          if (r.point != p || r.estimator != k || !r.converged()) continue;
          const double v = parameter_value(r.result, i);
          if (std::isfinite(v)) values.push_back(v);
        }
        SummaryCell c;
        c.point = p;
        c.point_value = t.points[p];
        c.estimator = k;
        c.parameter = params[i];
        c.truth = parameter_truth(truth, i);
        for (std::size_t q = 0; q < kSummaryPercentiles.size(); ++q) {
          c.percentiles[q] = percentile(values, kSummaryPercentiles[q]);
        }
        double sum = 0.0;
        for (double v : values) sum += v;
        c.mean = values.empty() ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(values.size());
        c.n_converged = static_cast<int>(values.size());
        c.n_failed = spec.n_sims - c.n_converged;
        t.cells.push_back(c);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Running

namespace {

std::vector<SimulationRecord> run_one(const ExperimentSpec& spec, std::size_t point, int sim,
                                      const std::vector<EstimatorKind>& kinds, const ConsumerDraws& draws) {
  const DgpConfig cfg = spec.config_at(point, sim);
  std::vector<SimulationRecord> out;
  for (EstimatorKind k : kinds) {
    SimulationRecord r;
    r.point = point;
    r.sim = sim;
    r.seed = cfg.seed;
    r.estimator = k;
    r.result.estimator = k;
    r.result.mode = spec.options.mode;
    out.push_back(std::move(r));
  }
  SimulatedPanel sp;
  try {
    sp = simulate_panel(cfg);
  } catch (const std::exception& e) {
    for (auto& r : out) r.error = std::string("simulation: ") + e.what();
    return out;
  }
  EstimatorOptions opts = spec.options;
  opts.permutation_seed = substream(cfg.seed, SeedStream::permutations)();
  InversionCache cache(sp.panel, draws, opts.inversion);
  for (auto& r : out) {
    r.dropped_markets = static_cast<int>(sp.panel.dropped.size());
    try {
      r.result = estimate(sp.panel, draws, r.estimator, opts, &cache);
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DomainError("cannot write " + path.string());
  f << text;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress) {
  spec.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto kinds = spec.estimator_list();
  const auto grid_values = spec.points();
  const ConsumerDraws draws = scrambled_halton_draws(spec.estimation_draws, spec.dgp.L1);

  const std::size_t n_tasks = grid_values.size() * static_cast<std::size_t>(spec.n_sims);
  std::vector<std::vector<SimulationRecord>> slots(n_tasks);
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  int done = 0;

  auto worker = [&] {
    for (std::size_t t = next++; t < n_tasks; t = next++) {
      const std::size_t point = t / static_cast<std::size_t>(spec.n_sims);
      const int sim = static_cast<int>(t % static_cast<std::size_t>(spec.n_sims));
      slots[t] = run_one(spec, point, sim, kinds, draws);
      if (progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        progress(++done, static_cast<int>(n_tasks));
      }
    }
  };

  unsigned n_workers = spec.workers == 0 ? std::max(1u, std::thread::hardware_concurrency())
                                         : static_cast<unsigned>(spec.workers);
  n_workers = static_cast<unsigned>(std::min<std::size_t>(n_workers, n_tasks));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  ExperimentResult out;
  double dropped = 0.0;
  for (auto& slot : slots) {
    if (!slot.empty()) dropped += slot.front().dropped_markets;
    for (auto& r : slot) out.records.push_back(std::move(r));
  }
  out.mean_dropped = dropped / static_cast<double>(n_tasks);
  out.summary = summarize(spec, out.records);
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!spec.output_dir.empty()) {
    const std::filesystem::path dir(spec.output_dir);
    std::filesystem::create_directories(dir);
    std::ostringstream raw;
    write_raw_csv(raw, spec, out.records);
    write_text(dir / "raw.csv", raw.str());

    nlohmann::json summary = out.summary.to_json();
    summary["master_seed"] = spec.master_seed;
    summary["dgp"] = dgp_config_to_json(spec.dgp);
    summary["mean_dropped_markets"] = out.mean_dropped;
    summary["wall_time"] = out.wall_time;
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& r : out.records) {
      if (!r.error.empty()) {
        failures.push_back({{"point", grid_values[r.point]}, {"sim", r.sim}, {"estimator", to_string(r.estimator)},
                            {"error", r.error}});
      }
    }
    summary["failures"] = failures;
    write_text(dir / "summary.json", summary.dump(2) + "\n");

    int figure = 1;
    for (int f = 1; f <= 4; ++f) {
      if (figure_experiment(f) == spec.experiment) figure = f;
    }
    std::ostringstream fig;
    emit_figure_data(fig, out.summary, figure, out.summary.estimators);
    write_text(dir / ("figure" + std::to_string(figure) + ".csv"), fig.str());
  }
  return out;
}

void write_raw_csv(std::ostream& out, const ExperimentSpec& spec, const std::vector<SimulationRecord>& records) {
  const auto grid_values = spec.points();
  const auto params = summary_parameters(spec.dgp);
  out << point_label(spec.experiment) << ",sim,seed,estimator,mode,parameter,truth,estimate,se,converged,error\n";
  for (const SimulationRecord& r : records) {
    const DgpConfig truth = spec.config_at(r.point, r.sim);
    const std::string mode = is_recentered(r.estimator) ? to_string(spec.options.mode) : "";
    for (std::size_t i = 0; i < params.size(); ++i) {
      out << format_double(grid_values[r.point]) << ',' << r.sim << ',' << r.seed << ',' << to_string(r.estimator)
          << ',' << mode << ',' << params[i] << ',' << format_double(parameter_truth(truth, i)) << ',';
      if (r.ok) {
        out << format_double(parameter_value(r.result, i)) << ',' << format_double(parameter_se(r.result, i));
      } else {
        out << "nan,nan";
      }
      out << ',' << (r.converged() ? 1 : 0) << ',' << clean(r.error) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Figure data

Experiment figure_experiment(int figure) {
  switch (figure) {
    case 1: return Experiment::baseline;
    case 2: return Experiment::shock_sweep;
    case 3: return Experiment::common_sweep;
    case 4: return Experiment::bliss;
    default: throw DomainError("figure must be 1, 2, 3 or 4");
  }
}

void emit_figure_data(std::ostream& out, const SummaryTable& table, int figure,
                      const std::vector<EstimatorKind>& required) {
  const Experiment e = figure_experiment(figure);
  out << point_label(e) << ",estimator,parameter,percentile,value,truth\n";
  if (table.cells.empty() && required.empty()) return;
  if (table.experiment != e) {
    throw DomainError("figure " + std::to_string(figure) + " needs the " + to_string(e) + " experiment");
  }
  const auto wanted = required.empty() ? all_estimators() : required;

  std::vector<std::string> params;
  for (const SummaryCell& c : table.cells) {
    if (std::find(params.begin(), params.end(), c.parameter) == params.end()) params.push_back(c.parameter);
  }
  if (params.empty()) params = {"alpha", "sigma1", "sigma2"};

  auto num = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("NA"); };
  for (std::size_t p = 0; p < table.points.size(); ++p) {
    const std::string pv = format_double(table.points[p]);
    for (EstimatorKind k : wanted) {
      for (const std::string& name : params) {
        const SummaryCell* c = table.find(p, k, name);
        if (c == nullptr) {
          double truth = std::numeric_limits<double>::quiet_NaN();
          for (const SummaryCell& other : table.cells) {
            if (other.point == p && other.parameter == name) truth = other.truth;
          }
          out << pv << ',' << to_string(k) << ',' << name << ",NA,NA," << num(truth) << '\n';
          continue;
        }
        for (std::size_t q = 0; q < kSummaryPercentiles.size(); ++q) {
          out << pv << ',' << to_string(k) << ',' << name << ',' << static_cast<int>(kSummaryPercentiles[q]) << ','
              << num(c->percentiles[q]) << ',' << num(c->truth) << '\n';
        }
        out << pv << ',' << to_string(k) << ',' << name << ",mean," << num(c->mean) << ',' << num(c->truth) << '\n';
      }
    }
  }
}

}  // namespace reciv
