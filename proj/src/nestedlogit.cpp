#include "reciv/nestedlogit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "reciv/error.hpp"

namespace reciv {

namespace {

void check_sigma(double sigma, const char* where) {
  if (!(sigma >= 0.0 && sigma < 1.0)) throw DomainError(std::string(where) + ": nesting parameter must lie in [0, 1)");
}

void check_labels(Eigen::Index n, const NestLabels& nest, const char* where) {
  if (nest.size() != n) throw DomainError(std::string(where) + ": one nest label per product required");
}

int label_count(const NestLabels& nest) { return nest.size() == 0 ? 0 : nest.maxCoeff() + 1; }

Vec nest_sums(const Vec& v, const NestLabels& nest) {
  if ((nest.array() < 0).any()) throw DomainError("nest labels must be nonnegative");
  Vec sums = Vec::Zero(label_count(nest));
  for (Eigen::Index j = 0; j < v.size(); ++j) sums(nest(j)) += v(j);
  return sums;
}

}  // namespace

NestedShares nested_shares(const Vec& delta, double sigma, const NestLabels& nest) {
  check_sigma(sigma, "nested_shares");
  check_labels(delta.size(), nest, "nested_shares");
  const double lambda = 1.0 - sigma;
  // Work relative to the largest scaled utility so D_n stays finite.
  const Vec scaled = delta / lambda;
  const double top = scaled.maxCoeff();
  const Vec e = (scaled.array() - top).exp().matrix();
  const Vec D = nest_sums(e, nest);  // D_n * exp(-top)
  // D_n^lambda = exp(lambda * top) * D^lambda; the outside good weighs 1.
  const double log_scale = lambda * top;
  const double outside_weight_log = -log_scale;
  const double base = std::max(0.0, outside_weight_log);
  double denom = std::exp(outside_weight_log - base);
  Vec nest_weight = Vec::Zero(D.size());
  for (Eigen::Index n = 0; n < D.size(); ++n) {
    if (D(n) > 0.0) nest_weight(n) = std::exp(lambda * std::log(D(n)) - base);
  }
  denom += nest_weight.sum();
  NestedShares out;
  out.s.resize(delta.size());
  for (Eigen::Index j = 0; j < delta.size(); ++j) {
    const int n = nest(j);
    out.s(j) = e(j) / D(n) * nest_weight(n) / denom;
  }
  out.s0 = std::exp(outside_weight_log - base) / denom;
  return out;
}

Vec nest_share_of(const Vec& s, const NestLabels& nest) {
  check_labels(s.size(), nest, "nest_share_of");
  const Vec totals = nest_sums(s, nest);
  Vec out(s.size());
  for (Eigen::Index j = 0; j < s.size(); ++j) out(j) = totals(nest(j));
  return out;
}

Vec nested_inversion(const Vec& s, double s0, const NestLabels& nest, double sigma) {
  check_sigma(sigma, "nested_inversion");
  if (!(s0 > 0.0) || !(s.array() > 0.0).all()) throw DomainError("nested_inversion: shares must be strictly positive");
  const Vec sn = nest_share_of(s, nest);
  return (s.array() / s0).log().matrix() - sigma * (s.array() / sn.array()).log().matrix();
}

Vec iv_relative_shock(const NestedMarket& market) {
  check_labels(market.g.size(), market.nest, "iv_relative_shock");
  const Vec g = market.recentered_shock();
  const Vec sums = nest_sums(g, market.nest);
  const Vec counts = nest_sums(Vec::Ones(g.size()), market.nest);
  Vec z(g.size());
  for (Eigen::Index j = 0; j < g.size(); ++j) z(j) = g(j) - sums(market.nest(j)) / counts(market.nest(j));
  return z;
}

Vec iv_weighted_shock(const NestedMarket& market) {
  check_labels(market.g.size(), market.nest, "iv_weighted_shock");
  if (market.lagged_s.size() != market.g.size()) throw DomainError("iv_weighted_shock: lagged shares are missing");
  if (!(market.lagged_s.array() > 0.0).all()) throw DomainError("iv_weighted_shock: lagged shares must be positive");
  const Vec g = market.recentered_shock();
  const Vec weighted = nest_sums(market.lagged_s.cwiseProduct(g), market.nest);
  const Vec totals = nest_sums(market.lagged_s, market.nest);
  Vec z(g.size());
  for (Eigen::Index j = 0; j < g.size(); ++j) z(j) = g(j) - weighted(market.nest(j)) / totals(market.nest(j));
  return z;
}

Vec iv_exact_prediction(const NestedMarket& market, double alpha_check, double sigma_check, double pi_check,
                        bool use_lagged) {
  check_sigma(sigma_check, "iv_exact_prediction");
  if (pi_check == 0.0) throw DomainError("iv_exact_prediction: pass-through must be nonzero");
  const Eigen::Index J = market.g.size();
  check_labels(J, market.nest, "iv_exact_prediction");
  const double a = alpha_check * pi_check / (1.0 - sigma_check);
  const Vec u = a * market.g;

  Vec base_weight = Vec::Ones(J);  // within-nest starting shares up to scale
  if (use_lagged) {
    if (market.lagged_s.size() != J) throw DomainError("iv_exact_prediction: lagged shares are missing");
    if (!(market.lagged_s.array() > 0.0).all()) throw DomainError("iv_exact_prediction: lagged shares must be positive");
    base_weight = market.lagged_s;
  }
  const Vec base_total = nest_share_of(base_weight, market.nest);
  const Vec log_base = (base_weight.array() / base_total.array()).log().matrix();

  // Per-nest log-sum-exp of log_base + u.
  const int n_nests = label_count(market.nest);
  Vec top = Vec::Constant(n_nests, -std::numeric_limits<double>::infinity());
  for (Eigen::Index j = 0; j < J; ++j) top(market.nest(j)) = std::max(top(market.nest(j)), log_base(j) + u(j));
  Vec acc = Vec::Zero(n_nests);
  for (Eigen::Index j = 0; j < J; ++j) acc(market.nest(j)) += std::exp(log_base(j) + u(j) - top(market.nest(j)));
  Vec out(J);
  for (Eigen::Index j = 0; j < J; ++j) {
    const int n = market.nest(j);
    out(j) = log_base(j) + u(j) - (top(n) + std::log(acc(n)));
  }
  return out;
}

Vec recenter_exact(const ShockPrediction& prediction, const Vec& actual,
                   const std::vector<Vec>& counterfactual_shocks) {
  if (counterfactual_shocks.empty()) throw DomainError("recenter_exact: at least one counterfactual is required");
  const Vec value = prediction(actual);
  Vec mean = Vec::Zero(value.size());
  for (const Vec& g : counterfactual_shocks) {
    if (g.size() != actual.size()) throw DomainError("recenter_exact: counterfactual shock has the wrong length");
    const Vec v = prediction(g);
    if (v.size() != value.size()) throw DomainError("recenter_exact: prediction changed shape");
    mean += v;
  }
  mean /= static_cast<double>(counterfactual_shocks.size());
  return value - mean;
}

std::vector<Vec> permuted_shocks(const Vec& g, int count, std::mt19937_64& rng) {
  if (count < 1) throw DomainError("permuted_shocks: count must be positive");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(g.size()));
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int c = 0; c < count; ++c) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    std::shuffle(order.begin(), order.end(), rng);
    Vec v(g.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) v(j) = g(order[static_cast<std::size_t>(j)]);
    out.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulator

NestedPanel simulate_nested_panel(const NestedDgpConfig& config) {
  if (config.n_markets < 1 || config.min_products < 1 || config.max_products < config.min_products ||
      config.n_nests < 1) {
    throw DomainError("simulate_nested_panel: invalid market layout");
  }
  check_sigma(config.sigma, "simulate_nested_panel");
  if (config.beta.size() != config.gamma.size() || config.beta.size() < 1) {
    throw DomainError("simulate_nested_panel: beta and gamma must have equal nonzero length");
  }
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> size_dist(config.min_products, config.max_products);
  std::uniform_int_distribution<int> nest_dist(0, config.n_nests - 1);
  const double innovation = std::sqrt(1.0 - config.ar_coef * config.ar_coef);
  const Eigen::Index K = config.beta.size();

  NestedPanel panel;
  for (int m = 0; m < config.n_markets; ++m) {
    const int J = size_dist(rng);
    NestLabels nest(J);
    for (int j = 0; j < J; ++j) nest(j) = nest_dist(rng);
    Mat x(J, K);
    x.col(0).setOnes();
    for (int j = 0; j < J; ++j) {
      for (Eigen::Index k = 1; k < K; ++k) x(j, k) = normal(rng);
    }
    Vec xi1(J), xi2(J), om1(J), om2(J), g(J);
    for (int j = 0; j < J; ++j) {
      xi1(j) = normal(rng);
      xi2(j) = config.ar_coef * xi1(j) + innovation * normal(rng);
      om1(j) = config.cost_demand_corr * xi1(j) + normal(rng);
      om2(j) = config.cost_demand_corr * xi2(j) + normal(rng);
      g(j) = config.shock_sd * normal(rng);
    }
    NestedMarket pre, post;
    for (int t = 1; t <= 2; ++t) {
      NestedMarket& mk = t == 1 ? pre : post;
      const Vec& xi = t == 1 ? xi1 : xi2;
      const Vec& om = t == 1 ? om1 : om2;
      mk.region = m + 1;
      mk.period = t;
      mk.x = x;
      mk.x1 = x.rightCols(K - 1);
      mk.g = t == 1 ? Vec(Vec::Zero(J)) : g;
      mk.g_mean = Vec::Zero(J);
      mk.nest = nest;
      mk.sigma_nest = config.sigma;
      const Vec cost = x * config.gamma + om + mk.g;
      mk.p = cost.array() + config.markup;
      const Vec delta = x * config.beta + config.alpha * mk.p + xi;
      const NestedShares sh = nested_shares(delta, config.sigma, nest);
      mk.s = sh.s;
      mk.s0 = sh.s0;
    }
    post.lagged_s = pre.s;
    panel.period1.push_back(std::move(pre));
    panel.period2.push_back(std::move(post));
  }
  return panel;
}

Vec two_stage_least_squares(const Vec& y, const Mat& X, const Mat& Z) {
  if (X.rows() != y.size() || Z.rows() != y.size()) throw DomainError("two_stage_least_squares: row mismatch");
  if (Z.cols() < X.cols()) throw RankError("two_stage_least_squares: fewer instruments than regressors");
  const Eigen::ColPivHouseholderQR<Mat> zqr(Z);
  if (zqr.rank() < Z.cols()) throw RankError("two_stage_least_squares: instruments are collinear");
  const Mat Xhat = Z * zqr.solve(X);
  const Eigen::ColPivHouseholderQR<Mat> qr(Xhat);
  if (qr.rank() < X.cols()) throw RankError("two_stage_least_squares: first stage is rank deficient");
  // (Xhat'X)^{-1} Xhat'y
  const Mat A = Xhat.transpose() * X;
  const Eigen::FullPivLU<Mat> lu(A);
  if (!lu.isInvertible()) throw RankError("two_stage_least_squares: singular normal equations");
  return lu.solve(Xhat.transpose() * y);
}

NestedIvResult nested_two_stage(const std::vector<NestedMarket>& markets) {
  if (markets.empty()) throw DomainError("nested_two_stage: no markets");
  const Eigen::Index K = markets.front().x.cols();
  Eigen::Index N = 0;
  for (const auto& m : markets) {
    if (m.x.cols() != K) throw DomainError("nested_two_stage: markets differ in characteristics");
    N += m.n_products();
  }
  Vec y(N);
  Mat X(N, 2 + K), Z(N, 2 + K);
  Eigen::Index row = 0;
  for (const auto& m : markets) {
    const Eigen::Index J = m.n_products();
    const Vec within = (m.s.array() / nest_share_of(m.s, m.nest).array()).log();
    y.segment(row, J) = (m.s.array() / m.s0).log().matrix();
    X.block(row, 0, J, 1) = m.p;
    X.block(row, 1, J, 1) = within;
    X.block(row, 2, J, K) = m.x;
    Z.block(row, 0, J, 1) = m.g;
    Z.block(row, 1, J, 1) = iv_relative_shock(m);
    Z.block(row, 2, J, K) = m.x;
    row += J;
  }
  const Vec b = two_stage_least_squares(y, X, Z);
  NestedIvResult out;
  out.alpha = b(0);
  out.sigma = b(1);
  out.beta = b.tail(K);
  out.observations = N;
  return out;
}

}  // namespace reciv
