#pragma once

// Nested logit shares, inversion, and the nest-based instrument family, plus
// a small two-period simulator for exercising them.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "reciv/types.hpp"

namespace reciv {

using NestLabels = Eigen::VectorXi;

/// A market whose products are grouped into nests. `lagged_s` holds the
/// pre-period inside shares (empty when unavailable).
struct NestedMarket : Market {
  NestLabels nest;
  double sigma_nest = 0.0;
  Vec lagged_s;
};

struct NestedShares {
  Vec s;
  double s0 = 0.0;
};

/// Shares under nesting parameter sigma in [0, 1): with
/// D_n = sum_{k in n} exp(delta_k / (1 - sigma)), s_j = exp(delta_j/(1-sigma)) / D_n * D_n^{1-sigma} / (1 + sum_n D_n^{1-sigma}).
NestedShares nested_shares(const Vec& delta, double sigma, const NestLabels& nest);

/// Nest totals s_{n(j)} for every product.
Vec nest_share_of(const Vec& s, const NestLabels& nest);

/// Mean utilities log(s_j/s0) - sigma log(s_j / s_{n(j)}).
Vec nested_inversion(const Vec& s, double s0, const NestLabels& nest, double sigma);

/// g minus its unweighted nest mean.
Vec iv_relative_shock(const NestedMarket& market);

/// g minus its nest mean weighted by lagged shares.
Vec iv_weighted_shock(const NestedMarket& market);

/// Predicted log within-nest shares after the cost shocks move mean
/// utilities by alpha_check * pi_check * g. Without lagged data each product
/// starts from an equal within-nest share; with lagged data the prediction
/// updates the lagged within-nest shares.
Vec iv_exact_prediction(const NestedMarket& market, double alpha_check, double sigma_check, double pi_check,
                        bool use_lagged);

using ShockPrediction = std::function<Vec(const Vec& shocks)>;

/// prediction(g) minus the mean of prediction over the counterfactual shock
/// vectors.
Vec recenter_exact(const ShockPrediction& prediction, const Vec& actual,
                   const std::vector<Vec>& counterfactual_shocks);

/// `count` random permutations of `g` within the market.
std::vector<Vec> permuted_shocks(const Vec& g, int count, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Simulator

struct NestedDgpConfig {
  int n_markets = 100;
  int min_products = 4;
  int max_products = 12;
  int n_nests = 3;
  double alpha = -1.0;
  double sigma = 0.5;
  Vec beta = Vec::Constant(2, 1.0);  // intercept and one characteristic
  Vec gamma = Vec::Constant(2, 1.0);
  double markup = 1.0;
  double ar_coef = 0.9;
  double shock_sd = 0.5;
  double cost_demand_corr = 0.5;  // loading of omega on xi
  std::uint64_t seed = 1;
};

/// Two periods per market: period 1 with zero shocks, period 2 with
/// g ~ N(0, shock_sd^2). Prices are cost plus a constant markup, and costs
/// load on xi so prices are endogenous. Period-2 markets carry the period-1
/// shares in `lagged_s`.
struct NestedPanel {
  std::vector<NestedMarket> period1;
  std::vector<NestedMarket> period2;
};

NestedPanel simulate_nested_panel(const NestedDgpConfig& config);

/// Two-stage least squares with the given regressors and instruments
/// (both N x K). Throws RankError on a singular first stage.
Vec two_stage_least_squares(const Vec& y, const Mat& X, const Mat& Z);

struct NestedIvResult {
  double alpha = 0.0;
  double sigma = 0.0;
  Vec beta;  // coefficients on the columns of x
  Eigen::Index observations = 0;
};

/// 2SLS of log(s_j/s0) on (p, log within-nest share, x) instrumented by
/// (g, iv_relative_shock, x), stacked over `markets`.
NestedIvResult nested_two_stage(const std::vector<NestedMarket>& markets);

}  // namespace reciv
