#pragma once

// Instrument construction: characteristic-based IVs, recentered shift-share
// and formula IVs, permutation recentering and the pass-through regression.

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "reciv/mixedlogit.hpp"
#include "reciv/panel.hpp"
#include "reciv/types.hpp"

namespace reciv {

enum class InstrumentKind { cost_shock, blp_sum, gh_quadratic, gh_local, reciv_ssiv, reciv_fiv };

/// CLI spelling: cost-shock, blp, gh-quad, gh-local, ssiv, fiv.
std::string to_string(InstrumentKind kind);
InstrumentKind instrument_kind_from_string(const std::string& name);
bool is_recentered(InstrumentKind kind);

// ---------------------------------------------------------------------------
// Characteristic-based instruments

/// Column l of product j: sum over rivals k != j of x1(k, l).
Mat blp_sum_iv(const Market& market);

enum class GhVariant { quadratic, local };

/// Quadratic: sum_{k != j} (x1(j,l) - x1(k,l))^2. Local: number of rivals with
/// |x1(j,l) - x1(k,l)| < kappa(l). `kappa` is ignored by the quadratic variant.
Mat gh_differentiation_iv(const Market& market, GhVariant variant, const Vec& kappa = Vec());

/// Standard deviation of every x1 column pooled over the given markets (all
/// markets when `markets` is empty).
Vec pooled_characteristic_sd(const Panel& panel, const std::vector<std::size_t>& markets = {});

// ---------------------------------------------------------------------------
// Pass-through

struct PassThrough {
  double pi_check = 0.0;
  double intercept = 0.0;
  std::string fitted_on;
};

/// OLS slope and intercept of dp on g. Throws DomainError when g has no
/// variance or the lengths differ.
PassThrough estimate_pass_through(const Vec& dp, const Vec& g);

/// The same regression stacked over all regions observed in both periods,
/// with price changes p_post - p_pre on the recentered post-period shocks.
PassThrough estimate_pass_through(const Panel& panel, int pre_period = 1, int post_period = 2);

// ---------------------------------------------------------------------------
// Shift-share instruments

/// First-order shock exposure: slice l holds w(j, k) = effect of shock k on
/// the l-th sigma instrument of product j.
struct SsivWeights {
  Tensor3 w;
  double alpha_check = 0.0;
  double pi_check = 0.0;
};

/// Weights at the lagged market's mean utilities:
/// w_l = alpha_check * pi_check * (d/d sigma_l dD/ds') * dS/d delta'.
SsivWeights ssiv_weights_at(const ShareKernel<double>& kernel, const Vec& sigma_check, const Vec& lagged_delta,
                            double alpha_check, double pi_check);

/// Inverts the lagged shares at theta_check.sigma and builds the weights.
SsivWeights ssiv_weights(const Market& lagged, const Theta& theta_check, double pi_check,
                         const ConsumerDraws& draws, const InversionConfig& config = {});

/// Column 0 is -pi_check * g~, columns 1..L1 are w_l g~, with g~ the
/// market's recentered shock.
Mat build_ssiv(const Market& market, const SsivWeights& weights);

/// Local-to-logit closed form of the sigma columns:
/// 2 alpha pi sigma_l x_jl sum_k s_k (x_kl - xbar_l) g~_k, xbar_l = sum_k s_k x_kl.
Mat ssiv_local_to_logit(const Vec& lagged_s, const Mat& x1, const Vec& sigma_check, double alpha_check,
                        double pi_check, const Vec& shocks);

// ---------------------------------------------------------------------------
// Formula instruments

/// dD/d sigma' evaluated at S(lagged_delta + alpha_check * pi_check * shocks),
/// which equals -[dS/d delta']^{-1} dS/d sigma' at the shifted utilities (J x L1).
Mat fiv_prediction_at(const ShareKernel<double>& kernel, const Vec& sigma_check, const Vec& lagged_delta,
                      double alpha_check, double pi_check, const Vec& shocks);

Mat fiv_prediction(const Market& market, const Theta& theta_check, double pi_check, const Vec& lagged_delta,
                   const Vec& shocks, const ConsumerDraws& draws);

// ---------------------------------------------------------------------------
// Permutation recentering

enum class PermutationScope { within_market, across_all };

std::string to_string(PermutationScope scope);

/// Counterfactual shock assignments: draws[c][m] is market m's shock vector
/// in counterfactual c.
struct ShockPermutations {
  PermutationScope scope = PermutationScope::across_all;
  std::vector<std::vector<Vec>> draws;

  int count() const { return static_cast<int>(draws.size()); }
};

/// `count` permutations of the pooled shocks (across_all) or of each market's
/// shocks separately (within_market). Deterministic given `seed`.
ShockPermutations draw_permutations(const std::vector<Vec>& actual, int count, PermutationScope scope,
                                    std::uint64_t seed);

/// Value of an instrument formula for market m under shock vector g.
using ShockFormula = std::function<Mat(std::size_t market, const Vec& shocks)>;

/// f(m, actual[m]) minus its mean over the counterfactual assignments.
std::vector<Mat> recenter_by_permutation(const ShockFormula& formula, const std::vector<Vec>& actual,
                                         const ShockPermutations& permutations);

// ---------------------------------------------------------------------------
// Instrument sets

struct InstrumentSet {
  InstrumentKind kind = InstrumentKind::cost_shock;
  std::vector<std::size_t> markets;  // panel indices
  std::vector<Mat> values;           // aligned with `markets`
  double alpha_check = std::numeric_limits<double>::quiet_NaN();
  Vec sigma_check;
  double pi_check = std::numeric_limits<double>::quiet_NaN();
  int permutations = 0;
  PermutationScope scope = PermutationScope::across_all;

  Eigen::Index columns() const { return values.empty() ? 0 : values.front().cols(); }
  Eigen::Index rows() const;
  /// All markets' values stacked in market order.
  Mat stacked() const;
};

struct InstrumentOptions {
  InstrumentKind kind = InstrumentKind::reciv_ssiv;
  int period = 2;
  Theta check;        // alpha_check, sigma_check for recentered kinds
  double pi_check = std::numeric_limits<double>::quiet_NaN();  // NaN: estimate from the panel
  Vec kappa;          // gh_local thresholds; empty: pooled sd over the period's markets
  int permutations = 20;
  PermutationScope scope = PermutationScope::across_all;
  std::uint64_t seed = 1;
  InversionConfig inversion;
};

/// Instruments for every market of `options.period` (recentered kinds: every
/// region observed in both `period - 1` and `period`).
InstrumentSet build_instruments(const Panel& panel, const ConsumerDraws& draws, const InstrumentOptions& options);

}  // namespace reciv
