// Acceptance checks, one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all); RECIV_ACCEPTANCE_OUT names a directory
// for the Monte Carlo outputs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "reciv/dgp.hpp"
#include "reciv/error.hpp"
#include "reciv/estimators.hpp"
#include "reciv/harness.hpp"
#include "reciv/instruments.hpp"
#include "reciv/mixedlogit.hpp"
#include "reciv/nestedlogit.hpp"
#include "test_support.hpp"

using namespace reciv;
using reciv::testing::normal_matrix;
using reciv::testing::normal_vector;
using reciv::testing::random_share_case;
using reciv::testing::relative_error;

namespace {

const double kAlphaTrue = -0.2 - 4.0 * std::exp(0.5);

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string output_root() {
  const char* env = std::getenv("RECIV_ACCEPTANCE_OUT");
  return env != nullptr ? env : "";
}

ExperimentResult run(ExperimentSpec spec, const std::string& name) {
  spec.workers = 0;
  const std::string root = output_root();
  if (!root.empty()) spec.output_dir = root + "/" + name;
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult r = run_experiment(spec);
  std::cerr << "  [" << name << "] " << spec.n_sims * static_cast<int>(spec.points().size()) << " simulations in "
            << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 3) << " s\n";
  return r;
}

const ExperimentResult& baseline() {
  static std::optional<ExperimentResult> cached;
  if (!cached) cached = run(experiment_defaults(Experiment::baseline, Scale::desk), "figure1");
  return *cached;
}

const SummaryCell& cell(const ExperimentResult& r, std::size_t point, EstimatorKind k, const std::string& param) {
  const SummaryCell* c = r.summary.find(point, k, param);
  if (c == nullptr) throw Error("missing summary cell " + to_string(k) + " " + param);
  return *c;
}

double iqr(const SummaryCell& c) { return c.percentiles[3] - c.percentiles[1]; }

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

ConsumerDraws skewed_standardized_draws(std::mt19937_64& rng, int count) {
  std::exponential_distribution<double> expo(1.0);
  Mat raw(count, 2);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = expo(rng);
  return standardized_draws(raw);
}

// 1 ---------------------------------------------------------------------------
Outcome inversion_correctness() {
  const ConsumerDraws draws = scrambled_halton_draws(250, 2);
  std::mt19937_64 rng(101);
  double worst = 0.0, worst_logit = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto c = random_share_case(rng, 2, 15, 4.0);
    double s0 = 0.0;
    const Vec s = shares(c.delta, c.sigma, c.x1, draws, &s0);
    worst = std::max(worst, (invert_shares(s, s0, c.sigma, c.x1, draws).delta - c.delta).cwiseAbs().maxCoeff());
    const Vec logit = (s.array() / s0).log();
    worst_logit = std::max(worst_logit, (invert_shares(s, s0, Vec::Zero(2), c.x1, draws).delta - logit)
                                            .cwiseAbs()
                                            .maxCoeff());
  }
  return {worst <= 1e-8 && worst_logit <= 1e-12,
          "max |invert(shares(delta)) - delta| = " + fmt(worst) + ", sigma=0 vs log(s/s0) = " + fmt(worst_logit)};
}

// 2 ---------------------------------------------------------------------------
Outcome derivative_suite() {
  const ConsumerDraws draws = scrambled_halton_draws(250, 2);
  std::mt19937_64 rng(202);
  const double h = 1e-5;
  double e_jac = 0, e_sig = 0, e_hess = 0, e_cross = 0, e_inv = 0;
  for (int rep = 0; rep < 100; ++rep) {
    auto c = random_share_case(rng, 2, 15, 4.0);
    const Eigen::Index J = c.delta.size();
    auto S = [&](const Vec& d, const Vec& sg) { return shares(d, sg, c.x1, draws); };
    auto Jac = [&](const Vec& d, const Vec& sg) { return share_jacobian_delta(d, sg, c.x1, draws); };

    Mat fd_jac(J, J), fd_sig(J, 2);
    for (Eigen::Index k = 0; k < J; ++k) {
      Vec up = c.delta, dn = c.delta;
      up(k) += h;
      dn(k) -= h;
      fd_jac.col(k) = (S(up, c.sigma) - S(dn, c.sigma)) / (2 * h);
    }
    e_jac = std::max(e_jac, relative_error(Jac(c.delta, c.sigma), fd_jac));

    const Tensor3 H = share_hessian_delta(c.delta, c.sigma, c.x1, draws);
    for (Eigen::Index k = 0; k < J; ++k) {
      Vec up = c.delta, dn = c.delta;
      up(k) += h;
      dn(k) -= h;
      e_hess = std::max(e_hess, relative_error(H[static_cast<std::size_t>(k)],
                                               (Jac(up, c.sigma) - Jac(dn, c.sigma)) / (2 * h)));
    }

    const Tensor3 X = share_cross_sigma_delta(c.delta, c.sigma, c.x1, draws);
    for (Eigen::Index l = 0; l < 2; ++l) {
      Vec up = c.sigma, dn = c.sigma;
      up(l) += h;
      dn(l) -= h;
      fd_sig.col(l) = (S(c.delta, up) - S(c.delta, dn)) / (2 * h);
      e_cross = std::max(e_cross, relative_error(X[static_cast<std::size_t>(l)],
                                                 (Jac(c.delta, up) - Jac(c.delta, dn)) / (2 * h)));
    }
    e_sig = std::max(e_sig, relative_error(share_dsigma(c.delta, c.sigma, c.x1, draws), fd_sig));

    // Inverse demand: derivatives in shares, sigma, and the cross term.
    Market m;
    double s0 = 0.0;
    m.s = shares(c.delta, c.sigma, c.x1, draws, &s0);
    m.s0 = s0;
    m.x1 = c.x1;
    Theta theta;
    theta.sigma = c.sigma;
    const InversionDerivatives d = inversion_derivatives(m, theta, draws);
    auto D = [&](const Vec& s, double out, const Vec& sg) { return invert_shares(s, out, sg, c.x1, draws).delta; };
    Mat fd_ds(J, J), fd_dsig(J, 2);
    for (Eigen::Index k = 0; k < J; ++k) {
      // Moving s_k alone moves the outside share by the opposite amount.
      const double hs = 1e-6 * m.s(k);
      Vec up = m.s, dn = m.s;
      up(k) += hs;
      dn(k) -= hs;
      fd_ds.col(k) = (D(up, m.s0 - hs, c.sigma) - D(dn, m.s0 + hs, c.sigma)) / (2 * hs);
    }
    for (Eigen::Index l = 0; l < 2; ++l) {
      Vec up = c.sigma, dn = c.sigma;
      up(l) += h;
      dn(l) -= h;
      fd_dsig.col(l) = (D(m.s, m.s0, up) - D(m.s, m.s0, dn)) / (2 * h);
      Theta tu = theta, td = theta;
      tu.sigma = up;
      td.sigma = dn;
      e_inv = std::max(e_inv, relative_error(d.dcross[static_cast<std::size_t>(l)],
                                             (inversion_derivatives(m, tu, draws).ds -
                                              inversion_derivatives(m, td, draws).ds) /
                                                 (2 * h)));
    }
    e_inv = std::max({e_inv, relative_error(d.ds, fd_ds), relative_error(d.dsigma, fd_dsig)});
  }
  const double worst = std::max({e_jac, e_sig, e_hess, e_cross, e_inv});
  return {worst <= 1e-4, "max relative error: jacobian " + fmt(e_jac) + ", dsigma " + fmt(e_sig) + ", hessian " +
                             fmt(e_hess) + ", cross " + fmt(e_cross) + ", inversion " + fmt(e_inv)};
}

// 3 ---------------------------------------------------------------------------
Outcome approximation_orders() {
  std::mt19937_64 rng(303);
  const ConsumerDraws draws = skewed_standardized_draws(rng, 4000);
  double worst_taylor = 0.0, worst_ssiv = 0.0;
  std::string detail;
  for (int rep = 0; rep < 5; ++rep) {
    const int J = 4 + 2 * rep;
    const Mat x1 = normal_matrix(rng, J, 2);
    const Vec delta = normal_vector(rng, J, 0.5).array() - 1.0;
    Vec direction(2);
    direction << 1.0, 0.6 + 0.1 * rep;

    std::vector<double> scales, share_err, inv_err, ssiv_gap;
    for (int i = 0; i < 5; ++i) {
      const double t = 0.16 / std::pow(2.0, i);
      scales.push_back(t);
      const Vec sigma = t * direction;
      double s0 = 0.0;
      const Vec s = shares(delta, sigma, x1, draws, &s0);
      share_err.push_back((s - local_to_logit_shares(delta, x1, sigma)).cwiseAbs().maxCoeff());
      inv_err.push_back((invert_shares(s, s0, sigma, x1, draws).delta - local_to_logit_inversion(s, s0, x1, sigma))
                            .cwiseAbs()
                            .maxCoeff());

      // Shift-share instrument at a logit lagged market against its closed form.
      double l0 = 0.0;
      const Vec ls = logit_shares(delta, &l0);
      Market m;
      m.region = 1;
      m.period = 1;
      m.x.resize(J, 3);
      m.x << Vec::Ones(J), x1;
      m.x1 = x1;
      m.p = Vec::Zero(J);
      m.s = ls;
      m.s0 = l0;
      std::mt19937_64 grng(404 + static_cast<std::uint64_t>(rep));
      m.g = normal_vector(grng, J, 0.2);
      Theta check;
      check.alpha = -3.0;
      check.sigma = Vec::Constant(2, t);
      const Mat z = build_ssiv(m, ssiv_weights(m, check, 0.7, draws)).rightCols(2);
      ssiv_gap.push_back((z - ssiv_local_to_logit(ls, x1, check.sigma, check.alpha, 0.7, m.g)).cwiseAbs().maxCoeff());
    }
    const double o_share = loglog_slope(scales, share_err);
    const double o_inv = loglog_slope(scales, inv_err);
    const double o_ssiv = loglog_slope(scales, ssiv_gap);
    worst_taylor = std::max({worst_taylor, std::fabs(o_share - 3.0), std::fabs(o_inv - 3.0)});
    worst_ssiv = std::max(worst_ssiv, std::fabs(o_ssiv - 2.0));
    if (rep == 0) detail = "orders (first market): shares " + fmt(o_share, 3) + ", inversion " + fmt(o_inv, 3) +
                           ", shift-share " + fmt(o_ssiv, 3);
  }
  return {worst_taylor <= 0.5 && worst_ssiv <= 0.5,
          detail + "; worst deviation: Taylor " + fmt(worst_taylor, 3) + ", shift-share " + fmt(worst_ssiv, 3)};
}

// 4 ---------------------------------------------------------------------------
Outcome pricing() {
  double worst_foc = 0.0;
  int markets = 0;
  for (int sim = 0; sim < 5; ++sim) {
    DgpConfig c;
    c.seed = simulation_seed(4, sim);
    const SimulatedPanel sp = simulate_panel(c);
    for (std::size_t i = 0; i < sp.panel.markets.size(); ++i) {
      const Market& m = sp.panel.markets[i];
      const Vec costs = m.x * c.gamma + sp.omega[i] + m.g;
      const Vec delta_exo = m.x * c.beta + sp.xi[i];
      const ShareKernel<double> kernel(m.x1, c.sigma_true, sp.dgp_draws.nu);
      const Vec r = pricing_foc_residual(m.p, costs, delta_exo, c.alpha_true, kernel, Ownership::single_product);
      worst_foc = std::max(worst_foc, r.cwiseAbs().maxCoeff());
      ++markets;
    }
  }

  const ConsumerDraws draws = pseudo_random_draws(1000, 2, 3);
  std::mt19937_64 rng(404);
  double worst_markup = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    Theta theta;
    theta.alpha = -reciv::testing::uniform(rng, 0.5, 8.0);
    theta.sigma = Vec::Zero(2);
    Vec costs(1), delta(1);
    costs << reciv::testing::uniform(rng, 0.5, 5.0);
    delta << reciv::testing::uniform(rng, -2.0, 6.0);
    const PricingResult r = solve_prices(costs, delta, theta, Mat::Ones(1, 2), draws);
    if (!r.ok) return {false, "single-product logit pricing failed"};
    const double s = logit_shares(delta + theta.alpha * r.p)(0);
    worst_markup = std::max(worst_markup, std::fabs((r.p(0) - costs(0)) + 1.0 / (theta.alpha * (1.0 - s))));
  }

  const double dropped = baseline().mean_dropped;
  return {worst_foc <= 1e-8 && worst_markup <= 1e-8 && dropped < 1.0,
          "max FOC residual " + fmt(worst_foc) + " over " + std::to_string(markets) + " markets, logit markup error " +
              fmt(worst_markup) + ", dropped markets per simulation " + fmt(dropped)};
}

// 5 ---------------------------------------------------------------------------
Outcome figure1() {
  const ExperimentResult& r = baseline();
  bool ok = true;
  std::string detail;
  for (EstimatorKind k : all_estimators()) {
    const bool blp = k == EstimatorKind::char_blp;
    const double a = cell(r, 0, k, "alpha").percentiles[2];
    const double s1 = cell(r, 0, k, "sigma1").percentiles[2];
    const double s2 = cell(r, 0, k, "sigma2").percentiles[2];
    const double ta = blp ? 0.25 * std::fabs(kAlphaTrue) : 0.35;
    const double ts = blp ? 1.0 : 0.6;
    const bool good = std::fabs(a - kAlphaTrue) <= ta && std::fabs(s1 - 4.0) <= ts && std::fabs(s2 - 4.0) <= ts;
    ok = ok && good;
    detail += (detail.empty() ? "" : "; ") + to_string(k) + " medians (" + fmt(a, 4) + ", " + fmt(s1, 3) + ", " +
              fmt(s2, 3) + ")" + (good ? "" : " OUT") + " conv " +
              std::to_string(cell(r, 0, k, "alpha").n_converged);
  }
  return {ok, detail};
}

// 6 ---------------------------------------------------------------------------
Outcome figure4() {
  ExperimentSpec spec = experiment_defaults(Experiment::bliss, Scale::desk);
  spec.estimators = {EstimatorKind::reciv_ssiv, EstimatorKind::char_gh_quadratic, EstimatorKind::char_gh_local};
  const ExperimentResult r = run(spec, "figure4");
  std::string detail;
  bool ok = true;
  for (EstimatorKind k : {EstimatorKind::char_gh_local, EstimatorKind::char_gh_quadratic}) {
    int small = 0;
    for (const SimulationRecord& rec : r.records) {
      if (rec.estimator == k && rec.converged() && rec.result.theta_hat.sigma(0) <= 0.1) ++small;
    }
    const double share = static_cast<double>(small) / spec.n_sims;
    ok = ok && share >= 0.9;
    detail += to_string(k) + " sigma1 <= 0.1 in " + fmt(100 * share, 3) + "% of draws; ";
  }
  const double s1 = cell(r, 0, EstimatorKind::reciv_ssiv, "sigma1").percentiles[2];
  const double a = cell(r, 0, EstimatorKind::reciv_ssiv, "alpha").percentiles[2];
  ok = ok && s1 >= 3.0 && s1 <= 5.0 && std::fabs(a - kAlphaTrue) <= 0.1 * std::fabs(kAlphaTrue);
  detail += "reciv-ssiv median sigma1 " + fmt(s1) + ", median alpha " + fmt(a);
  return {ok, detail};
}

// 7 ---------------------------------------------------------------------------
Outcome figure2() {
  ExperimentSpec spec = experiment_defaults(Experiment::shock_sweep, Scale::desk);
  spec.grid = {0.1, 0.4};
  spec.estimators = {EstimatorKind::reciv_ssiv};
  const ExperimentResult r = run(spec, "figure2");
  const double low = iqr(cell(r, 0, EstimatorKind::reciv_ssiv, "sigma1"));
  const double mid = iqr(cell(baseline(), 0, EstimatorKind::reciv_ssiv, "sigma1"));
  const double high = iqr(cell(r, 1, EstimatorKind::reciv_ssiv, "sigma1"));
  return {low > mid && mid > high,
          "reciv-ssiv sigma1 IQR at sd 0.1 / 0.2 / 0.4: " + fmt(low) + " / " + fmt(mid) + " / " + fmt(high)};
}

// 8 ---------------------------------------------------------------------------
Outcome figure3() {
  ExperimentSpec spec = experiment_defaults(Experiment::common_sweep, Scale::desk);
  spec.grid = {10, 15};
  spec.estimators = {EstimatorKind::reciv_ssiv, EstimatorKind::char_gh_quadratic, EstimatorKind::char_gh_local};
  const ExperimentResult r = run(spec, "figure3");
  bool ok = true;
  std::string detail;
  for (EstimatorKind k : {EstimatorKind::char_gh_quadratic, EstimatorKind::char_gh_local}) {
    const double c0 = iqr(cell(baseline(), 0, k, "sigma1"));
    const double c10 = iqr(cell(r, 0, k, "sigma1"));
    const double c15 = iqr(cell(r, 1, k, "sigma1"));
    ok = ok && c0 <= c10 && c10 <= c15;
    detail += to_string(k) + " sigma1 IQR at C = 0 / 10 / 15: " + fmt(c0) + " / " + fmt(c10) + " / " + fmt(c15) + "; ";
  }
  const double s0 = iqr(cell(baseline(), 0, EstimatorKind::reciv_ssiv, "sigma1"));
  const double s10 = iqr(cell(r, 0, EstimatorKind::reciv_ssiv, "sigma1"));
  const double s15 = iqr(cell(r, 1, EstimatorKind::reciv_ssiv, "sigma1"));
  const double change = std::max(std::fabs(s10 - s0), std::fabs(s15 - s0)) / s0;
  ok = ok && change < 0.5;
  detail += "reciv-ssiv: " + fmt(s0) + " / " + fmt(s10) + " / " + fmt(s15) + " (max change " +
            fmt(100 * change, 3) + "%)";
  return {ok, detail};
}

// 9 ---------------------------------------------------------------------------
Outcome recentering_validity() {
  DgpConfig cfg;
  cfg.n_regions = 20;
  cfg.seed = 909;
  const SimulatedPanel sp = simulate_panel(cfg);
  const ConsumerDraws draws = scrambled_halton_draws(250, 2);
  const auto pairs = region_pairs(sp.panel);
  Theta check;
  check.alpha = cfg.alpha_true;
  check.sigma = cfg.sigma_true;
  const double pi = 0.5;
  std::vector<SsivWeights> weights;
  for (const auto& rp : pairs) weights.push_back(ssiv_weights(sp.panel.markets[rp.pre], check, pi, draws));

  std::mt19937_64 rng(910);
  const int redraws = 200;
  // corr[kind][b](instrument column, characteristic)
  std::vector<std::vector<Mat>> corr(2, std::vector<Mat>(redraws, Mat::Zero(3, 2)));
  double worst_identity = 0.0;
  for (int b = 0; b < redraws; ++b) {
    Panel panel = sp.panel;
    std::vector<Vec> shocks, resid;
    for (const auto& rp : pairs) {
      Market& post = panel.markets[rp.post];
      post.g = normal_vector(rng, post.n_products(), cfg.shock_sd);
      shocks.push_back(post.g);
      resid.push_back(normal_vector(rng, post.n_products()));
    }
    Eigen::Index n = 0;
    for (const auto& rp : pairs) n += panel.markets[rp.post].n_products();
    Mat chars(n, 2);
    std::vector<Mat> z(2, Mat(n, 3));
    Vec direct = Vec::Zero(3);
    InstrumentOptions fiv;
    fiv.kind = InstrumentKind::reciv_fiv;
    fiv.check = check;
    fiv.pi_check = pi;
    fiv.seed = static_cast<std::uint64_t>(b) + 1;
    const InstrumentSet fset = build_instruments(panel, draws, fiv);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const Market& post = panel.markets[pairs[i].post];
      const Eigen::Index J = post.n_products();
      const Mat ss = build_ssiv(post, weights[i]);
      z[0].middleRows(row, J) = ss;
      z[1].middleRows(row, J) = fset.values[i];
      chars.middleRows(row, J) = post.x1;
      direct += ss.transpose() * resid[i];
      row += J;
    }
    const Vec total = aggregate_shock_residuals(weights, shocks, resid).total;
    worst_identity = std::max(worst_identity, (total - direct).cwiseAbs().maxCoeff() /
                                                  std::max(1.0, direct.cwiseAbs().maxCoeff()));
    for (int k = 0; k < 2; ++k) {
      for (Eigen::Index c = 0; c < 3; ++c) {
        const Vec zc = z[static_cast<std::size_t>(k)].col(c).array() - z[static_cast<std::size_t>(k)].col(c).mean();
        for (Eigen::Index l = 0; l < 2; ++l) {
          const Vec xc = chars.col(l).array() - chars.col(l).mean();
          corr[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)](c, l) = zc.dot(xc) / (zc.norm() * xc.norm());
        }
      }
    }
  }
  bool ok = worst_identity <= 1e-10;
  double worst_t = 0.0;
  for (const auto& series : corr) {
    for (Eigen::Index c = 0; c < 3; ++c) {
      for (Eigen::Index l = 0; l < 2; ++l) {
        double mean = 0.0, sq = 0.0;
        for (const Mat& v : series) mean += v(c, l);
        mean /= redraws;
        for (const Mat& v : series) sq += (v(c, l) - mean) * (v(c, l) - mean);
        const double se = std::sqrt(sq / (redraws - 1) / redraws);
        worst_t = std::max(worst_t, std::fabs(mean) / se);
      }
    }
  }
  ok = ok && worst_t <= 3.0;
  return {ok, "max |mean corr| / SE over shift-share and formula columns " + fmt(worst_t, 3) +
                  ", reordering identity error " + fmt(worst_identity)};
}

// 10 --------------------------------------------------------------------------
Outcome scale_invariance() {
  DgpConfig cfg;
  cfg.n_regions = 50;
  cfg.seed = simulation_seed(10, 0);
  const SimulatedPanel sp = simulate_panel(cfg);
  const ConsumerDraws draws = scrambled_halton_draws(250, 2);
  const double pi = estimate_pass_through(sp.panel).pi_check;
  double worst = 0.0;
  std::string detail;
  for (RecenteredMode mode : {RecenteredMode::continuously_updating, RecenteredMode::iterative}) {
    EstimatorOptions o;
    o.mode = mode;
    o.standard_errors = false;
    o.pi_check = pi;
    const EstimationResult a = estimate(sp.panel, draws, EstimatorKind::reciv_ssiv, o);
    o.pi_check = 10.0 * pi;
    const EstimationResult b = estimate(sp.panel, draws, EstimatorKind::reciv_ssiv, o);
    const double d = std::max(std::fabs(a.theta_hat.alpha - b.theta_hat.alpha),
                              (a.theta_hat.sigma - b.theta_hat.sigma).cwiseAbs().maxCoeff());
    worst = std::max(worst, d);
    detail += to_string(mode) + " max change " + fmt(d) + " (alpha " + fmt(a.theta_hat.alpha, 5) + "); ";
  }
  return {worst < 1e-6, detail + "pass-through scaled by 10"};
}

// 11 --------------------------------------------------------------------------
Outcome nested_module() {
  const int sims = 200;
  NestedDgpConfig cfg;
  Vec alpha(sims), sigma(sims);
  double worst_hat = 0.0;
  for (int sim = 0; sim < sims; ++sim) {
    cfg.seed = 11000 + static_cast<std::uint64_t>(sim);
    const NestedPanel panel = simulate_nested_panel(cfg);
    const NestedIvResult r = nested_two_stage(panel.period2);
    alpha(sim) = r.alpha;
    sigma(sim) = r.sigma;
    if (sim < 20) {
      for (NestedMarket m : panel.period2) {
        m.g.setZero();
        const Vec pred = iv_exact_prediction(m, cfg.alpha, cfg.sigma, 0.8, true);
        const Vec lagged = (m.lagged_s.array() / nest_share_of(m.lagged_s, m.nest).array()).log();
        worst_hat = std::max(worst_hat, (pred - lagged).cwiseAbs().maxCoeff());
      }
    }
  }
  auto bias_in_se = [&](const Vec& est, double truth) {
    const double mean = est.mean();
    const double se = std::sqrt((est.array() - mean).square().sum() / (est.size() - 1) / est.size());
    return std::fabs(mean - truth) / se;
  };
  const double ba = bias_in_se(alpha, cfg.alpha);
  const double bs = bias_in_se(sigma, cfg.sigma);
  return {ba < 2.0 && bs < 2.0 && worst_hat <= 1e-12,
          "|mean bias| / MC SE: alpha " + fmt(ba, 3) + " (mean " + fmt(alpha.mean()) + "), sigma " + fmt(bs, 3) +
              " (mean " + fmt(sigma.mean()) + "); zero-shock prediction error " + fmt(worst_hat)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"inversion correctness", inversion_correctness},
      {"derivative suite", derivative_suite},
      {"approximation orders", approximation_orders},
      {"pricing", pricing},
      {"baseline medians (desk scale)", figure1},
      {"endogenous characteristics", figure4},
      {"shock variance sweep", figure2},
      {"common products sweep", figure3},
      {"recentering validity", recentering_validity},
      {"pass-through scale invariance", scale_invariance},
      {"nested logit module", nested_module},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && selected.count(id) == 0) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail << " ("
              << fmt(secs, 3) << " s)" << std::endl;
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
