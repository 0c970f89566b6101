#pragma once

// Monte Carlo experiments: repeated simulation and estimation over a grid of
// DGP settings, summarized as percentile tables and long-format figure data.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "reciv/dgp.hpp"
#include "reciv/estimators.hpp"

namespace reciv {

enum class Experiment { baseline, shock_sweep, common_sweep, bliss };
enum class Scale { full, desk };

/// CLI spellings: baseline, shock-sweep, common-sweep, bliss.
std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& name);
std::string to_string(Scale s);  // full, desk
Scale scale_from_string(const std::string& name);

/// Shock sd {0.1, 0.2, 0.3, 0.4}; common products {0, 5, 10, 15}; the other
/// experiments have the single point of the base configuration.
std::vector<double> default_grid(Experiment e, const DgpConfig& base = {});
std::vector<EstimatorKind> all_estimators();

struct ExperimentSpec {
  Experiment experiment = Experiment::baseline;
  int n_sims = 100;
  DgpConfig dgp;                          // base configuration; seed and swept field set per point
  std::vector<double> grid;               // empty: default_grid
  std::vector<EstimatorKind> estimators;  // empty: all five
  EstimatorOptions options;
  int estimation_draws = 250;
  std::uint64_t master_seed = 1;
  int workers = 1;  // 0: hardware concurrency
  std::string output_dir;  // empty: nothing written

  /// Throws DomainError on an invalid spec.
  void validate() const;
  std::vector<double> points() const;
  std::vector<EstimatorKind> estimator_list() const;
  /// Configuration of simulation `sim` at grid point `point`. The seed
  /// depends on (master_seed, sim) only.
  DgpConfig config_at(std::size_t point, int sim) const;
};

/// full: 100 simulations of 100 regions; desk: 50 of 50.
ExperimentSpec experiment_defaults(Experiment e, Scale scale = Scale::full);

std::uint64_t simulation_seed(std::uint64_t master_seed, int sim);

struct SimulationRecord {
  std::size_t point = 0;
  int sim = 0;
  std::uint64_t seed = 0;
  EstimatorKind estimator = EstimatorKind::reciv_ssiv;
  bool ok = false;  // estimation returned (possibly unconverged)
  std::string error;
  EstimationResult result;
  int dropped_markets = 0;

  bool converged() const { return ok && result.converged(); }
};

/// Percentile with linear interpolation between order statistics
/// (q in [0, 100]); NaN for an empty sample.
double percentile(std::vector<double> values, double q);

inline constexpr std::array<double, 5> kSummaryPercentiles{10, 25, 50, 75, 90};

struct SummaryCell {
  std::size_t point = 0;
  double point_value = 0.0;
  EstimatorKind estimator = EstimatorKind::reciv_ssiv;
  std::string parameter;  // alpha, sigma1, sigma2, ...
  double truth = 0.0;
  std::array<double, 5> percentiles{};  // over converged draws
  double mean = 0.0;
  int n_converged = 0;
  int n_failed = 0;
};

struct SummaryTable {
  Experiment experiment = Experiment::baseline;
  std::vector<double> points;
  std::vector<EstimatorKind> estimators;
  int n_sims = 0;
  std::vector<SummaryCell> cells;

  /// Null when absent.
  const SummaryCell* find(std::size_t point, EstimatorKind estimator, const std::string& parameter) const;
  nlohmann::json to_json() const;
};

std::string point_label(Experiment e);  // shock_sd, common_products, ...
std::vector<std::string> summary_parameters(const DgpConfig& config);

SummaryTable summarize(const ExperimentSpec& spec, const std::vector<SimulationRecord>& records);

struct ExperimentResult {
  SummaryTable summary;
  std::vector<SimulationRecord> records;  // ordered by (point, sim, estimator)
  double mean_dropped = 0.0;              // dropped markets per simulated panel
  double wall_time = 0.0;
};

using ProgressFn = std::function<void(int done, int total)>;

/// Runs every (point, sim) on a worker pool and writes raw.csv and
/// summary.json to spec.output_dir when set. Failures of single simulations
/// are recorded and do not stop the run.
ExperimentResult run_experiment(const ExperimentSpec& spec, const ProgressFn& progress = {});

/// One row per (point, sim, estimator, parameter); no timing columns, so
/// identical specs give identical bytes.
void write_raw_csv(std::ostream& out, const ExperimentSpec& spec, const std::vector<SimulationRecord>& records);

/// The experiment behind each figure: 1 baseline, 2 shock sweep, 3 common
/// sweep, 4 bliss.
Experiment figure_experiment(int figure);

/// Long-format box-plot data: point,estimator,parameter,percentile,value,truth.
/// Estimators in `required` (default: all five, or none for an empty table)
/// without cells get a gap row with value NA.
void emit_figure_data(std::ostream& out, const SummaryTable& table, int figure,
                      const std::vector<EstimatorKind>& required = {});

}  // namespace reciv
