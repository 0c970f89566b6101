#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "doctest.h"
#include "reciv/dgp.hpp"
#include "reciv/error.hpp"
#include "reciv/estimators.hpp"
#include "reciv/instruments.hpp"
#include "test_support.hpp"

using namespace reciv;
using reciv::testing::normal_matrix;
using reciv::testing::normal_vector;
using reciv::testing::relative_error;

namespace {

SimulatedPanel small_panel(int regions, std::uint64_t seed, double shock_sd = 0.2) {
  DgpConfig cfg;
  cfg.n_regions = regions;
  cfg.seed = seed;
  cfg.shock_sd = shock_sd;
  return simulate_panel(cfg);
}

Theta truth_of(const DgpConfig& cfg) { return Theta{cfg.alpha_true, cfg.sigma_true}; }

const ConsumerDraws& estimation_draws() {
  static const ConsumerDraws draws = scrambled_halton_draws(250, 2);
  return draws;
}

// Stacked D(s_post) - D(s_pre) by cold-start inversion, market by market.
Vec brute_delta_change(const Panel& panel, const Vec& sigma) {
  const auto pairs = region_pairs(panel);
  std::vector<Vec> parts;
  Eigen::Index n = 0;
  for (const auto& rp : pairs) {
    const Market& a = panel.markets[rp.pre];
    const Market& b = panel.markets[rp.post];
    const Vec da = invert_shares(a.s, a.s0, sigma, a.x1, estimation_draws()).delta;
    const Vec db = invert_shares(b.s, b.s0, sigma, b.x1, estimation_draws()).delta;
    parts.push_back(db - da);
    n += db.size();
  }
  Vec out(n);
  Eigen::Index row = 0;
  for (const auto& v : parts) {
    out.segment(row, v.size()) = v;
    row += v.size();
  }
  return out;
}

Vec stacked_price_change(const Panel& panel) {
  const auto pairs = region_pairs(panel);
  Eigen::Index n = 0;
  for (const auto& rp : pairs) n += panel.markets[rp.post].n_products();
  Vec dp(n);
  Eigen::Index row = 0;
  for (const auto& rp : pairs) {
    const Eigen::Index J = panel.markets[rp.post].n_products();
    dp.segment(row, J) = panel.markets[rp.post].p - panel.markets[rp.pre].p;
    row += J;
  }
  return dp;
}

Mat centered(const Mat& m) { return m.rowwise() - m.colwise().mean(); }

}  // namespace

TEST_CASE("softplus transform") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(softplus(-40.0) > 0.0);
  CHECK(softplus(-40.0) < 1e-17);
  CHECK(softplus(800.0) == doctest::Approx(800.0));
  CHECK(std::isfinite(transform_softplus(1e4).value));
  for (double a : {-5.0, 0.0, 5.0}) {
    const double h = 1e-5;
    const double fd = (softplus(a + h) - softplus(a - h)) / (2.0 * h);
    CHECK(std::abs(transform_softplus(a).derivative - fd) < 1e-8);
  }
  for (double y : {1e-10, 0.3, 4.0, 45.0}) CHECK(softplus(softplus_inverse(y)) == doctest::Approx(y).epsilon(1e-12));
  CHECK_THROWS_AS(softplus_inverse(0.0), DomainError);
}

TEST_CASE("concentrating out linear parameters") {
  std::mt19937_64 rng(11);
  const Mat X = normal_matrix(rng, 40, 3);

  SUBCASE("Z = X is OLS") {
    const Vec y = normal_vector(rng, 40);
    const Vec b = concentrate_linear(y, X, X, Mat::Identity(3, 3));
    const Vec ols = X.colPivHouseholderQr().solve(y);
    CHECK(relative_error(b, ols) < 1e-10);
  }
  SUBCASE("exact linear index") {
    const Mat Z = normal_matrix(rng, 40, 5);
    const Vec b0 = (Vec(3) << 1.5, -2.0, 0.25).finished();
    const Vec y = X * b0;
    const Mat W = (Z.transpose() * Z / 40.0).inverse();
    CHECK(relative_error(concentrate_linear(y, X, Z, W), b0) < 1e-12);
    CHECK((concentrated_moment_operator(X, Z, W) * y).norm() < 1e-10);
  }
  SUBCASE("generic solver oracle") {
    const Mat Z = X + 0.5 * normal_matrix(rng, 40, 3);
    const Mat Zx = (Mat(40, 5) << Z, normal_matrix(rng, 40, 2)).finished();
    const Vec y = normal_vector(rng, 40);
    const Mat A = normal_matrix(rng, 5, 5);
    const Mat W = A * A.transpose() + Mat::Identity(5, 5);
    // weighted least squares of L'Z'y on L'Z'X with W = L L'
    const Mat L = W.llt().matrixL();
    const Mat lhs = L.transpose() * Zx.transpose() * X;
    const Vec rhs = L.transpose() * Zx.transpose() * y;
    const Vec oracle = lhs.householderQr().solve(rhs);
    CHECK(relative_error(concentrate_linear(y, X, Zx, W), oracle) < 1e-10);
  }
  SUBCASE("singular system") {
    Mat Xs = X;
    Xs.col(2) = Xs.col(1);
    CHECK_THROWS_AS(concentrate_linear(normal_vector(rng, 40), Xs, Xs, Mat::Identity(3, 3), "dup"), RankError);
  }
}

TEST_CASE("aggregated shock residuals") {
  std::mt19937_64 rng(5);
  SUBCASE("zero residuals") {
    std::vector<SsivWeights> w(1);
    w[0].pi_check = 0.8;
    w[0].w = {normal_matrix(rng, 4, 4), normal_matrix(rng, 4, 4)};
    const auto agg = aggregate_shock_residuals(w, {normal_vector(rng, 4)}, {Vec::Zero(4)});
    CHECK(agg.residual[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(agg.total.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("diagonal weights") {
    std::vector<SsivWeights> w(1);
    w[0].pi_check = 1.0;
    const Vec d = normal_vector(rng, 5);
    w[0].w = {Mat(d.asDiagonal())};
    const Vec e = normal_vector(rng, 5);
    const auto agg = aggregate_shock_residuals(w, {normal_vector(rng, 5)}, {e});
    CHECK(relative_error(agg.residual[0].col(1), d.cwiseProduct(e)) < 1e-15);
  }
  SUBCASE("summation reordering on a random panel") {
    std::vector<SsivWeights> w;
    std::vector<Vec> g, e;
    Vec direct = Vec::Zero(3);
    for (int m = 0; m < 12; ++m) {
      const int J = 3 + m % 5;
      SsivWeights sw;
      sw.pi_check = 0.7;
      sw.w = {normal_matrix(rng, J, J), normal_matrix(rng, J, J)};
      g.push_back(normal_vector(rng, J));
      e.push_back(normal_vector(rng, J));
      for (int j = 0; j < J; ++j) {
        direct(0) += -0.7 * g.back()(j) * e.back()(j);
        for (int l = 0; l < 2; ++l) {
          double z = 0.0;
          for (int k = 0; k < J; ++k) z += sw.w[l](j, k) * g.back()(k);
          direct(l + 1) += z * e.back()(j);
        }
      }
      w.push_back(sw);
    }
    const auto agg = aggregate_shock_residuals(w, g, e);
    CHECK((agg.total - direct).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("sandwich standard errors") {
  std::mt19937_64 rng(8);
  const int n = 400;
  const Mat Z = (Mat(n, 2) << Vec::Ones(n), normal_vector(rng, n)).finished();
  Mat X(n, 2);
  X.col(0).setOnes();
  X.col(1) = Z.col(1) + 0.5 * normal_vector(rng, n);
  const Vec y = X * Vec::Constant(2, 1.0) + normal_vector(rng, n);
  const Vec b = (Z.transpose() * X).lu().solve(Z.transpose() * y);
  const Vec e = y - X * b;

  SUBCASE("heteroskedasticity-robust just-identified IV") {
    Mat meat = Mat::Zero(2, 2);
    for (int i = 0; i < n; ++i) meat += Z.row(i).transpose() * Z.row(i) * e(i) * e(i);
    const Mat ZXi = (Z.transpose() * X).inverse();
    const Mat V = ZXi * meat * ZXi.transpose();
    Mat scores(2, n);
    for (int i = 0; i < n; ++i) scores.col(i) = Z.row(i).transpose() * e(i);
    const Mat G = -Z.transpose() * X / static_cast<double>(n);
    const auto se = sandwich_standard_errors(G, Mat::Identity(2, 2), scores, n, Clustering::by_market);
    CHECK(relative_error(se.covariance, V) < 1e-10);
    CHECK(se.clusters == n);
  }
  SUBCASE("duplicated clusters") {
    Mat scores(2, n);
    for (int i = 0; i < n; ++i) scores.col(i) = Z.row(i).transpose() * e(i);
    const Mat G = -Z.transpose() * X / static_cast<double>(n);
    const auto one = sandwich_standard_errors(G, Mat::Identity(2, 2), scores, n, Clustering::by_market);
    const auto two = sandwich_standard_errors(G, Mat::Identity(2, 2), (Mat(2, 2 * n) << scores, scores).finished(),
                                              2 * n, Clustering::by_market);
    CHECK(two.clusters == 2 * one.clusters);
    CHECK(relative_error(two.se, one.se / std::sqrt(2.0)) < 1e-12);
  }
  SUBCASE("fewer clusters than parameters") {
    CHECK_THROWS_AS(sandwich_standard_errors(Mat::Identity(2, 2), Mat::Identity(2, 2), Mat::Ones(2, 1), 10,
                                             Clustering::by_market),
                    DomainError);
  }
}

TEST_CASE("estimator names") {
  for (auto k : {EstimatorKind::char_blp, EstimatorKind::char_gh_quadratic, EstimatorKind::char_gh_local,
                 EstimatorKind::reciv_ssiv, EstimatorKind::reciv_fiv}) {
    CHECK(estimator_kind_from_string(to_string(k)) == k);
  }
  CHECK(recentered_mode_from_string("iterative") == RecenteredMode::iterative);
  CHECK(clustering_from_string("shock") == Clustering::by_shock);
  CHECK_THROWS_AS(estimator_kind_from_string("ssiv"), DomainError);
}

TEST_CASE("inverse-demand jacobian in sigma matches finite differences") {
  const auto sp = small_panel(6, 21);
  EstimatorOptions o;
  RecenteredObjective obj(sp.panel, estimation_draws(), InstrumentKind::reciv_ssiv, o);
  const Vec sigma = (Vec(2) << 3.0, 4.5).finished();
  const Mat analytic = obj.delta_change_jacobian(sigma);
  const Mat numeric = finite_difference_jacobian([&](const Vec& s) { return brute_delta_change(sp.panel, s); },
                                                 sigma, 1e-5);
  CHECK(relative_error(numeric, analytic) < 1e-5);
  CHECK(obj.moments(-6.0, sigma).size() == 3);
}

TEST_CASE("characteristic IV path") {
  const auto sp = small_panel(20, 4);
  const Theta truth = truth_of(sp.truth);
  EstimatorOptions o;
  o.start = truth;
  const auto r = estimate_char_iv(sp.panel, estimation_draws(), EstimatorKind::char_gh_quadratic, o);
  REQUIRE(r.converged());
  CHECK(r.moments.size() == 6);
  CHECK(r.beta_hat.size() == 3);
  CHECK(r.objective < 1e-16);
  CHECK(r.theta_hat.sigma.minCoeff() >= 0.0);
  REQUIRE(r.se.has_value());
  CHECK(r.se->se.size() == 6);
  CHECK_THROWS_AS(gmm_standard_errors(r, sp.panel, estimation_draws(), Clustering::by_shock, o), DomainError);
  CHECK_THROWS_AS(estimate_char_iv(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, o), DomainError);

  SUBCASE("restart at the estimate stops immediately") {
    EstimatorOptions again = o;
    again.start = r.theta_hat;
    const auto r2 = estimate_char_iv(sp.panel, estimation_draws(), EstimatorKind::char_gh_quadratic, again);
    CHECK(r2.report.iterations == 1);
    CHECK(r2.report.final_step_norm <= kStepTolerance);
  }

  SUBCASE("duplicating every market") {
    Panel twice = sp.panel;
    for (const Market& m : sp.panel.markets) {
      Market c = m;
      c.region += 1000;
      twice.markets.push_back(c);
    }
    EstimatorOptions again = o;
    again.start = r.theta_hat;
    const auto r2 = estimate_char_iv(twice, estimation_draws(), EstimatorKind::char_gh_quadratic, again);
    CHECK(std::abs(r2.theta_hat.alpha - r.theta_hat.alpha) < 1e-6);
    CHECK((r2.theta_hat.sigma - r.theta_hat.sigma).cwiseAbs().maxCoeff() < 1e-6);
    REQUIRE(r2.se.has_value());
    CHECK(r2.se->clusters == 2 * r.se->clusters);
    CHECK(relative_error(r2.se->se, r.se->se / std::sqrt(2.0)) < 1e-4);
  }
}

TEST_CASE("characteristic IV on logit data") {
  std::vector<double> alpha, sigma1;
  double alpha_true = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    DgpConfig cfg;
    cfg.n_regions = 30;
    cfg.seed = seed;
    cfg.sigma_true = Vec::Zero(2);
    alpha_true = cfg.alpha_true;
    const auto sp = simulate_panel(cfg);
    EstimatorOptions o;
    o.grid_points = 20;
    o.standard_errors = false;
    const auto r = estimate_char_iv(sp.panel, estimation_draws(), EstimatorKind::char_gh_quadratic, o);
    if (!r.converged()) continue;
    alpha.push_back(r.theta_hat.alpha);
    sigma1.push_back(r.theta_hat.sigma(0));
  }
  REQUIRE(alpha.size() >= 8);
  const double n = static_cast<double>(alpha.size());
  double mean = 0.0, ss = 0.0;
  for (double a : alpha) mean += a / n;
  for (double a : alpha) ss += (a - mean) * (a - mean);
  const double se = std::sqrt(ss / (n - 1.0) / n);
  MESSAGE("mean alpha " << mean << " (truth " << alpha_true << "), MC SE " << se);
  CHECK(std::abs(mean - alpha_true) <= 3.0 * se + 1e-3);
  std::sort(sigma1.begin(), sigma1.end());
  CHECK(sigma1[sigma1.size() / 2] < 0.5);
}

TEST_CASE("recentered estimation without shock variation") {
  const auto sp = small_panel(8, 2, 0.0);
  EstimatorOptions o;
  CHECK_THROWS_AS(estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, o), RankError);
  o.mode = RecenteredMode::iterative;
  CHECK_THROWS_AS(estimate(sp.panel, estimation_draws(), EstimatorKind::reciv_fiv, o), RankError);
}

TEST_CASE("continuously-updating recentered estimation") {
  const auto sp = small_panel(20, 6);
  const Theta truth = truth_of(sp.truth);
  EstimatorOptions o;
  o.start = truth;
  const auto r = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, o);
  REQUIRE(r.converged());
  CHECK(r.moments.size() == 3);
  CHECK(r.objective < 1e-18);
  CHECK(r.theta_hat.alpha < 0.0);
  CHECK(r.theta_hat.sigma.minCoeff() >= 0.0);
  REQUIRE(r.se.has_value());
  const auto by_shock = gmm_standard_errors(r, sp.panel, estimation_draws(), Clustering::by_shock, o);
  CHECK(by_shock.clusters == 20 * 15);
  CHECK(by_shock.se.allFinite());

  SUBCASE("pass-through scale invariance") {
    EstimatorOptions scaled = o;
    scaled.pi_check = 10.0 * r.pi_check;
    const auto r10 = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, scaled);
    CHECK(std::abs(r10.theta_hat.alpha - r.theta_hat.alpha) < 1e-6);
    CHECK((r10.theta_hat.sigma - r.theta_hat.sigma).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("restart at the estimate stops immediately") {
    EstimatorOptions again = o;
    again.start = r.theta_hat;
    const auto r2 = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, again);
    CHECK(r2.report.iterations == 1);
    CHECK(r2.report.final_step_norm <= kStepTolerance);
  }

  SUBCASE("shared grid cache does not change the estimate") {
    EstimatorOptions grid;
    grid.grid_points = 8;
    grid.standard_errors = false;
    InversionCache cache(sp.panel, estimation_draws());
    const auto a = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, grid, &cache);
    const auto b = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_ssiv, grid);
    CHECK(cache.size() > 0);
    CHECK(a.theta_hat.alpha == b.theta_hat.alpha);
    CHECK(a.theta_hat.sigma == b.theta_hat.sigma);
    CHECK(a.grid_start == b.grid_start);
  }
}

TEST_CASE("formula IV recentered estimation") {
  const auto sp = small_panel(15, 9);
  EstimatorOptions o;
  o.start = truth_of(sp.truth);
  const auto r = estimate_cu_recentered(sp.panel, estimation_draws(), EstimatorKind::reciv_fiv, o);
  REQUIRE(r.converged());
  CHECK(r.objective < 1e-18);
  CHECK(r.theta_hat.alpha < 0.0);
}

TEST_CASE("iterative recentered estimation") {
  const auto sp = small_panel(20, 7);
  const Theta truth = truth_of(sp.truth);
  const ConsumerDraws& draws = estimation_draws();

  SUBCASE("frozen instruments match a direct GMM solve") {
    EstimatorOptions o;
    o.mode = RecenteredMode::iterative;
    o.start = truth;
    o.max_outer = 1;
    o.standard_errors = false;
    const auto r = estimate_iterative_recentered(sp.panel, draws, EstimatorKind::reciv_ssiv, o);

    InstrumentOptions io;
    io.kind = InstrumentKind::reciv_ssiv;
    io.check = truth;
    io.pi_check = r.pi_check;
    const Mat Z = centered(build_instruments(sp.panel, draws, io).stacked());
    const Vec dp = centered(stacked_price_change(sp.panel));
    const double n = static_cast<double>(dp.size());
    const auto moments = [&](const Vec& t) -> Vec {
      const Vec dd = centered(brute_delta_change(sp.panel, t.tail(2)));
      return Z.transpose() * (dd - t(0) * dp) / n;
    };
    Vec t(3);
    t << truth.alpha, truth.sigma;
    for (int it = 0; it < 30; ++it) {
      const Mat J = finite_difference_jacobian(moments, t, 1e-5);
      const Vec step = J.lu().solve(moments(t));
      t -= step;
      if (step.norm() < 1e-11) break;
    }
    CHECK(moments(t).norm() < 1e-9 * moments((Vec(3) << truth.alpha + 1.0, truth.sigma).finished()).norm());
    CHECK(std::abs(r.theta_hat.alpha - t(0)) < 1e-6);
    CHECK((r.theta_hat.sigma - t.tail(2)).cwiseAbs().maxCoeff() < 1e-6);
  }

  SUBCASE("outer fixed point is self-consistent") {
    const auto big = small_panel(50, 1);
    const Panel& panel = big.panel;
    EstimatorOptions o;
    o.mode = RecenteredMode::iterative;
    o.start = truth;
    const auto r = estimate_iterative_recentered(panel, draws, EstimatorKind::reciv_ssiv, o);
    REQUIRE(r.converged());
    CHECK(r.outer_iterations > 1);
    CHECK(r.moments.norm() < 1e-8);
    REQUIRE(r.se.has_value());

    EstimatorOptions again = o;
    again.start = r.theta_hat;
    again.max_outer = 1;
    const auto r2 = estimate_iterative_recentered(panel, draws, EstimatorKind::reciv_ssiv, again);
    CHECK((r2.theta_hat.sigma - r.theta_hat.sigma).norm() < 1e-6);

    o.mode = RecenteredMode::continuously_updating;
    const auto cu = estimate(panel, draws, EstimatorKind::reciv_ssiv, o);
    REQUIRE(cu.converged());
    MESSAGE("iterative " << r.theta_hat.alpha << " " << r.theta_hat.sigma.transpose() << "  cu " << cu.theta_hat.alpha
                         << " " << cu.theta_hat.sigma.transpose());
    CHECK(std::abs(cu.theta_hat.alpha - r.theta_hat.alpha) < 0.5);
  }
}

TEST_CASE("objective at the truth with instruments fixed") {
  int wins = 0;
  const int sims = 20;
  for (int s = 1; s <= sims; ++s) {
    const auto sp = small_panel(50, 100 + static_cast<std::uint64_t>(s));
    const Theta truth = truth_of(sp.truth);
    InstrumentOptions io;
    io.kind = InstrumentKind::reciv_ssiv;
    io.check = truth;
    const Mat Z = build_instruments(sp.panel, estimation_draws(), io).stacked();
    const Vec dp = stacked_price_change(sp.panel);
    const double n = static_cast<double>(dp.size());
    const auto q = [&](double alpha, const Vec& sigma) {
      const Vec h = Z.transpose() * (brute_delta_change(sp.panel, sigma) - alpha * dp) / n;
      return h.squaredNorm();
    };
    if (q(truth.alpha, truth.sigma) < q(truth.alpha + 1.0, truth.sigma.array() + 1.0)) ++wins;
  }
  MESSAGE("truth preferred in " << wins << " of " << sims);
  CHECK(wins >= 19);
}
