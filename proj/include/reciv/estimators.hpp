#pragma once

// GMM estimation of (alpha, sigma): characteristic-IV estimation in levels
// with alpha and beta concentrated out, and continuously-updating or
// iterative estimation with recentered instruments in first differences.

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "reciv/instruments.hpp"
#include "reciv/mixedlogit.hpp"
#include "reciv/panel.hpp"
#include "reciv/solvers.hpp"
#include "reciv/types.hpp"

namespace reciv {

// ---------------------------------------------------------------------------
// Transforms

struct Transformed {
  double value = 0.0;
  double derivative = 0.0;
};

/// log(1 + exp(a)) and its derivative exp(a) / (1 + exp(a)), overflow safe.
Transformed transform_softplus(double a);
double softplus(double a);
/// Inverse of softplus on (0, inf).
double softplus_inverse(double y);

// ---------------------------------------------------------------------------
// Linear pieces

/// (X'Z W Z'X)^{-1} X'Z W Z'y. Throws RankError naming `what` when X'ZWZ'X is
/// singular.
Vec concentrate_linear(const Vec& y, const Mat& X, const Mat& Z, const Mat& W,
                       const std::string& what = "instruments");

/// Annihilator of the concentrated linear parameters:
/// Z' - Z'X (X'ZWZ'X)^{-1} X'ZWZ', so that h = M y / N.
Mat concentrated_moment_operator(const Mat& X, const Mat& Z, const Mat& W, const std::string& what = "instruments");

// ---------------------------------------------------------------------------
// Inversion cache

/// Mean utilities by (market, sigma), computed from the cold start log(s/s0)
/// so that values do not depend on the order of requests. Shared by the
/// estimators of one simulation for the grid stage.
class InversionCache {
 public:
  InversionCache(const Panel& panel, const ConsumerDraws& draws, InversionConfig config = {});

  const Vec& delta(std::size_t market, const Vec& sigma);
  std::size_t size() const { return values_.size(); }

 private:
  const Panel& panel_;
  const ConsumerDraws& draws_;
  InversionConfig config_;
  std::map<std::pair<std::size_t, std::vector<double>>, Vec> values_;
};

// ---------------------------------------------------------------------------
// Estimators

enum class EstimatorKind { char_blp, char_gh_quadratic, char_gh_local, reciv_ssiv, reciv_fiv };
enum class RecenteredMode { continuously_updating, iterative };
enum class Clustering { by_market, by_shock };

/// CLI spellings: char-blp, char-gh-quad, char-gh-local, reciv-ssiv, reciv-fiv.
std::string to_string(EstimatorKind kind);
EstimatorKind estimator_kind_from_string(const std::string& name);
std::string to_string(RecenteredMode mode);  // cu, iterative
RecenteredMode recentered_mode_from_string(const std::string& name);
std::string to_string(Clustering c);  // market, shock
Clustering clustering_from_string(const std::string& name);
InstrumentKind instrument_kind_of(EstimatorKind kind);
bool is_recentered(EstimatorKind kind);

struct EstimatorOptions {
  RecenteredMode mode = RecenteredMode::continuously_updating;
  int grid_points = 50;
  double grid_upper = 10.0;
  double step_tolerance = kStepTolerance;
  double gradient_tolerance = kGradientTolerance;
  int max_iterations = 100;
  int max_outer = 100;
  int fallback_iterations = 500;
  // Recentered instruments.
  int permutations = 20;
  PermutationScope scope = PermutationScope::across_all;
  std::uint64_t permutation_seed = 1;
  double pi_check = std::numeric_limits<double>::quiet_NaN();  // NaN: OLS on the panel
  // Characteristic instruments.
  Vec kappa;  // gh_local thresholds; empty: pooled sd
  // Skip the grid and start here (alpha ignored by the characteristic path).
  std::optional<Theta> start;
  InversionConfig inversion;
  bool standard_errors = true;
  Clustering clustering = Clustering::by_market;
};

struct StandardErrors {
  Clustering clustering = Clustering::by_market;
  int clusters = 0;
  Mat covariance;  // ordered as EstimationResult::parameter_names()
  Vec se;
};

struct EstimationResult {
  EstimatorKind estimator = EstimatorKind::reciv_ssiv;
  RecenteredMode mode = RecenteredMode::continuously_updating;
  Theta theta_hat;
  Vec beta_hat;  // characteristic path only
  OptimizerReport report;
  double objective = std::numeric_limits<double>::quiet_NaN();
  Vec grid_start;  // sigma (characteristic) or (alpha, sigma) (recentered)
  Vec moments;
  bool fallback_used = false;
  std::string fallback_reason;
  int outer_iterations = 0;
  double pi_check = std::numeric_limits<double>::quiet_NaN();
  std::optional<StandardErrors> se;
  std::string se_error;
  double wall_time = 0.0;

  bool converged() const { return report.converged; }
  /// alpha, sigma_1..L1, then beta_0.. on the characteristic path.
  std::vector<std::string> parameter_names() const;
};

/// Characteristic-IV estimation on the period-2 markets. Moments Z'xi / N
/// with Z = [g, x, two characteristic IVs] and W = (Z'Z/N)^{-1}.
EstimationResult estimate_char_iv(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                  const EstimatorOptions& options = {}, InversionCache* shared = nullptr);

/// Continuously-updating recentered-IV estimation in first differences.
EstimationResult estimate_cu_recentered(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                        const EstimatorOptions& options = {}, InversionCache* shared = nullptr);

/// Iterative recentered-IV estimation: instruments fixed at the previous
/// estimate, alpha concentrated out, outer loop on sigma.
EstimationResult estimate_iterative_recentered(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                               const EstimatorOptions& options = {},
                                               InversionCache* shared = nullptr);

/// Dispatch on the estimator kind and options.mode.
EstimationResult estimate(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                          const EstimatorOptions& options = {}, InversionCache* shared = nullptr);

// ---------------------------------------------------------------------------
// Recentered objective

/// Moments of the recentered first-difference problem with instruments
/// rebuilt at each (alpha, sigma). Inversions are cached per sigma.
class RecenteredObjective {
 public:
  RecenteredObjective(const Panel& panel, const ConsumerDraws& draws, InstrumentKind kind,
                      const EstimatorOptions& options, InversionCache* shared = nullptr);
  ~RecenteredObjective();
  RecenteredObjective(RecenteredObjective&&) noexcept;
  RecenteredObjective& operator=(RecenteredObjective&&) noexcept;

  Eigen::Index observations() const;
  Eigen::Index n_sigma() const;
  double pi_check() const;
  InstrumentKind kind() const;
  const std::vector<RegionPair>& pairs() const;
  /// Row offset of each region pair in the stacked vectors.
  const std::vector<Eigen::Index>& offsets() const;
  const Vec& price_change() const;
  const Vec& shocks() const;

  /// Stacked D(s_post; sigma) - D(s_pre; sigma). `grid` marks grid points,
  /// whose inversions come from the shared cache.
  Vec delta_change(const Vec& sigma, bool grid = false);
  /// Stacked d/d sigma' of delta_change (N x L1).
  Mat delta_change_jacobian(const Vec& sigma);
  /// Stacked instruments (N x (1 + L1)) at (alpha, sigma).
  Mat instruments(double alpha, const Vec& sigma, bool grid = false);
  /// Z(theta)' (dD - alpha dp) / N.
  Vec moments(double alpha, const Vec& sigma, bool grid = false);
  /// IV slope of dD on dp (with intercept) instrumented by g.
  double iv_slope(const Vec& sigma, bool grid = false);
  /// First-order shock weights per region pair at (alpha, sigma).
  std::vector<SsivWeights> shock_weights(double alpha, const Vec& sigma);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Inference

/// Aggregated shock-level residuals per region pair (J x (1 + L1)): column 0
/// is -pi_check * resid, column l is w_l' resid. `total` is
/// sum_m sum_k g~_km R_km, which equals the stacked Z' resid.
struct ShockResiduals {
  std::vector<Mat> residual;
  Vec total;
};

ShockResiduals aggregate_shock_residuals(const std::vector<SsivWeights>& weights, const std::vector<Vec>& shocks,
                                         const std::vector<Vec>& residuals);

/// Sandwich (G'WG)^{-1} G'W Omega W G (G'WG)^{-1} / N with
/// Omega = sum_c s_c s_c' / N over cluster scores s_c. Throws DomainError
/// when there are fewer clusters than parameters.
StandardErrors sandwich_standard_errors(const Mat& G, const Mat& W, const Mat& cluster_scores, Eigen::Index N,
                                        Clustering clustering);

/// Standard errors for a finished estimate (recomputes the scores at
/// theta_hat). by_shock is only available for recentered estimators.
StandardErrors gmm_standard_errors(const EstimationResult& result, const Panel& panel, const ConsumerDraws& draws,
                                   Clustering clustering, const EstimatorOptions& options = {});

}  // namespace reciv
