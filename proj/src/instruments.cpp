#include "reciv/instruments.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "reciv/error.hpp"

namespace reciv {

std::string to_string(InstrumentKind kind) {
  switch (kind) {
    case InstrumentKind::cost_shock:
      return "cost-shock";
    case InstrumentKind::blp_sum:
      return "blp";
    case InstrumentKind::gh_quadratic:
      return "gh-quad";
    case InstrumentKind::gh_local:
      return "gh-local";
    case InstrumentKind::reciv_ssiv:
      return "ssiv";
    case InstrumentKind::reciv_fiv:
      return "fiv";
  }
  return "unknown";
}

InstrumentKind instrument_kind_from_string(const std::string& name) {
  for (InstrumentKind k : {InstrumentKind::cost_shock, InstrumentKind::blp_sum, InstrumentKind::gh_quadratic,
                           InstrumentKind::gh_local, InstrumentKind::reciv_ssiv, InstrumentKind::reciv_fiv}) {
    if (to_string(k) == name) return k;
  }
  throw DomainError("unknown instrument kind '" + name + "'");
}

bool is_recentered(InstrumentKind kind) {
  return kind == InstrumentKind::reciv_ssiv || kind == InstrumentKind::reciv_fiv;
}

std::string to_string(PermutationScope scope) {
  return scope == PermutationScope::across_all ? "across_all" : "within_market";
}

// ---------------------------------------------------------------------------
// Characteristic-based instruments

Mat blp_sum_iv(const Market& market) {
  const Mat& x1 = market.x1;
  if (x1.rows() < 2) return Mat::Zero(x1.rows(), x1.cols());
  const Eigen::RowVectorXd total = x1.colwise().sum();
  return (-x1).rowwise() + total;
}

Mat gh_differentiation_iv(const Market& market, GhVariant variant, const Vec& kappa) {
  const Mat& x1 = market.x1;
  const Eigen::Index J = x1.rows();
  const Eigen::Index L1 = x1.cols();
  if (variant == GhVariant::local) {
    if (kappa.size() != L1) throw DomainError("gh_differentiation_iv: one threshold per characteristic required");
    if (!(kappa.array() > 0.0).all()) throw DomainError("gh_differentiation_iv: thresholds must be positive");
  }
  Mat z = Mat::Zero(J, L1);
  for (Eigen::Index l = 0; l < L1; ++l) {
    for (Eigen::Index j = 0; j < J; ++j) {
      for (Eigen::Index k = j + 1; k < J; ++k) {
        const double d = x1(j, l) - x1(k, l);
        const double v = variant == GhVariant::quadratic ? d * d : (std::abs(d) < kappa(l) ? 1.0 : 0.0);
        z(j, l) += v;
        z(k, l) += v;
      }
    }
  }
  return z;
}

Vec pooled_characteristic_sd(const Panel& panel, const std::vector<std::size_t>& markets) {
  std::vector<std::size_t> use = markets;
  if (use.empty()) {
    use.resize(panel.markets.size());
    std::iota(use.begin(), use.end(), std::size_t{0});
  }
  if (use.empty()) throw DomainError("pooled_characteristic_sd: no markets");
  const Eigen::Index L1 = panel.markets[use.front()].x1.cols();
  Vec sum = Vec::Zero(L1), sum_sq = Vec::Zero(L1);
  double n = 0.0;
  for (std::size_t m : use) {
    const Mat& x1 = panel.markets[m].x1;
    sum += x1.colwise().sum().transpose();
    n += static_cast<double>(x1.rows());
  }
  const Vec mean = sum / n;
  for (std::size_t m : use) {
    const Mat& x1 = panel.markets[m].x1;
    sum_sq += (x1.rowwise() - mean.transpose()).colwise().squaredNorm().transpose();
  }
  if (n < 2.0) throw DomainError("pooled_characteristic_sd: need at least two products");
  return (sum_sq / (n - 1.0)).cwiseSqrt();
}

// ---------------------------------------------------------------------------
// Pass-through

PassThrough estimate_pass_through(const Vec& dp, const Vec& g) {
  if (dp.size() != g.size()) throw DomainError("estimate_pass_through: length mismatch");
  if (g.size() < 2) throw DomainError("estimate_pass_through: need at least two observations");
  const double gbar = g.mean();
  const double pbar = dp.mean();
  const Vec gc = g.array() - gbar;
  const double sxx = gc.squaredNorm();
  if (!(sxx > 0.0)) throw DomainError("estimate_pass_through: shocks have no variance");
  PassThrough out;
  out.pi_check = gc.dot(dp.array().matrix() - Vec::Constant(dp.size(), pbar)) / sxx;
  out.intercept = pbar - out.pi_check * gbar;
  if (!std::isfinite(out.pi_check)) throw DomainError("estimate_pass_through: non-finite slope");
  std::ostringstream desc;
  desc << "OLS of price change on shock, " << g.size() << " observations";
  out.fitted_on = desc.str();
  return out;
}

PassThrough estimate_pass_through(const Panel& panel, int pre_period, int post_period) {
  const auto pairs = region_pairs(panel, pre_period, post_period);
  Eigen::Index n = 0;
  for (const auto& rp : pairs) n += panel.markets[rp.post].n_products();
  Vec dp(n), g(n);
  Eigen::Index row = 0;
  for (const auto& rp : pairs) {
    const Market& pre = panel.markets[rp.pre];
    const Market& post = panel.markets[rp.post];
    const Eigen::Index J = post.n_products();
    dp.segment(row, J) = post.p - pre.p;
    g.segment(row, J) = post.recentered_shock();
    row += J;
  }
  return estimate_pass_through(dp, g);
}

// ---------------------------------------------------------------------------
// Shift-share instruments

SsivWeights ssiv_weights_at(const ShareKernel<double>& kernel, const Vec& sigma_check, const Vec& lagged_delta,
                            double alpha_check, double pi_check) {
  const InversionDerivatives d = inversion_derivatives_at(kernel, sigma_check, lagged_delta, false);
  const Eigen::Index L1 = sigma_check.size();
  SsivWeights out;
  out.alpha_check = alpha_check;
  out.pi_check = pi_check;
  out.w.resize(static_cast<std::size_t>(L1));
  // (d/d sigma_l dD/ds') dS/d delta' = -[dS/d delta']^{-1} T_l, with T_l the
  // total sigma_l derivative of the share jacobian along the inversion path.
  for (Eigen::Index l = 0; l < L1; ++l) {
    const Mat T = share_jacobian_direction(kernel, lagged_delta, d.dsigma.col(l), Vec::Unit(L1, l));
    out.w[static_cast<std::size_t>(l)] = -(alpha_check * pi_check) * (d.ds * T);
  }
  return out;
}

SsivWeights ssiv_weights(const Market& lagged, const Theta& theta_check, double pi_check,
                         const ConsumerDraws& draws, const InversionConfig& config) {
  const ShareKernel<double> kernel(lagged.x1, theta_check.sigma, draws.nu);
  const InversionResult inv = invert_shares(lagged.s, lagged.s0, kernel, config);
  return ssiv_weights_at(kernel, theta_check.sigma, inv.delta, theta_check.alpha, pi_check);
}

Mat build_ssiv(const Market& market, const SsivWeights& weights) {
  const Vec g = market.recentered_shock();
  const Eigen::Index J = g.size();
  Mat z(J, 1 + static_cast<Eigen::Index>(weights.w.size()));
  z.col(0) = -weights.pi_check * g;
  for (std::size_t l = 0; l < weights.w.size(); ++l) {
    if (weights.w[l].rows() != J || weights.w[l].cols() != J) {
      throw DomainError("build_ssiv: weights do not match the market's product count");
    }
    z.col(static_cast<Eigen::Index>(l) + 1) = weights.w[l] * g;
  }
  return z;
}

Mat ssiv_local_to_logit(const Vec& lagged_s, const Mat& x1, const Vec& sigma_check, double alpha_check,
                        double pi_check, const Vec& shocks) {
  Mat z(x1.rows(), x1.cols());
  for (Eigen::Index l = 0; l < x1.cols(); ++l) {
    const double xbar = lagged_s.dot(x1.col(l));
    const double cov = (lagged_s.array() * (x1.col(l).array() - xbar) * shocks.array()).sum();
    z.col(l) = (2.0 * alpha_check * pi_check * sigma_check(l) * cov) * x1.col(l);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Formula instruments

Mat fiv_prediction_at(const ShareKernel<double>& kernel, const Vec& sigma_check, const Vec& lagged_delta,
                      double alpha_check, double pi_check, const Vec& shocks) {
  if (shocks.size() != lagged_delta.size()) throw DomainError("fiv_prediction: shock vector has the wrong length");
  // D(S(d)) = d, so the inverse-demand derivative needs no further inversion.
  const Vec shifted = lagged_delta + (alpha_check * pi_check) * shocks;
  return inversion_derivatives_at(kernel, sigma_check, shifted, false).dsigma;
}

Mat fiv_prediction(const Market& market, const Theta& theta_check, double pi_check, const Vec& lagged_delta,
                   const Vec& shocks, const ConsumerDraws& draws) {
  const ShareKernel<double> kernel(market.x1, theta_check.sigma, draws.nu);
  return fiv_prediction_at(kernel, theta_check.sigma, lagged_delta, theta_check.alpha, pi_check, shocks);
}

// ---------------------------------------------------------------------------
// Permutation recentering

ShockPermutations draw_permutations(const std::vector<Vec>& actual, int count, PermutationScope scope,
                                    std::uint64_t seed) {
  if (count < 1) throw DomainError("draw_permutations: count must be positive");
  std::mt19937_64 rng(seed);
  ShockPermutations out;
  out.scope = scope;
  out.draws.resize(static_cast<std::size_t>(count));

  if (scope == PermutationScope::within_market) {
    for (auto& cf : out.draws) {
      cf.reserve(actual.size());
      for (const Vec& g : actual) {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(g.size()));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        Vec v(g.size());
        for (Eigen::Index j = 0; j < g.size(); ++j) v(j) = g(order[static_cast<std::size_t>(j)]);
        cf.push_back(std::move(v));
      }
    }
    return out;
  }

  std::vector<double> pooled;
  for (const Vec& g : actual) pooled.insert(pooled.end(), g.data(), g.data() + g.size());
  for (auto& cf : out.draws) {
    std::vector<double> perm = pooled;
    std::shuffle(perm.begin(), perm.end(), rng);
    cf.reserve(actual.size());
    std::size_t pos = 0;
    for (const Vec& g : actual) {
      cf.push_back(Eigen::Map<const Vec>(perm.data() + pos, g.size()));
      pos += static_cast<std::size_t>(g.size());
    }
  }
  return out;
}

std::vector<Mat> recenter_by_permutation(const ShockFormula& formula, const std::vector<Vec>& actual,
                                         const ShockPermutations& permutations) {
  if (permutations.count() < 1) throw DomainError("recenter_by_permutation: no counterfactuals");
  std::vector<Mat> out(actual.size());
  for (std::size_t m = 0; m < actual.size(); ++m) {
    const Mat value = formula(m, actual[m]);
    Mat mean = Mat::Zero(value.rows(), value.cols());
    for (const auto& cf : permutations.draws) {
      if (cf.size() != actual.size()) throw DomainError("recenter_by_permutation: counterfactual market count");
      mean += formula(m, cf[m]);
    }
    out[m] = value - mean / static_cast<double>(permutations.count());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instrument sets

Eigen::Index InstrumentSet::rows() const {
  Eigen::Index n = 0;
  for (const Mat& v : values) n += v.rows();
  return n;
}

Mat InstrumentSet::stacked() const {
  Mat out(rows(), columns());
  Eigen::Index row = 0;
  for (const Mat& v : values) {
    out.middleRows(row, v.rows()) = v;
    row += v.rows();
  }
  return out;
}

InstrumentSet build_instruments(const Panel& panel, const ConsumerDraws& draws, const InstrumentOptions& options) {
  InstrumentSet set;
  set.kind = options.kind;

  if (!is_recentered(options.kind)) {
    set.markets = panel.in_period(options.period);
    if (set.markets.empty()) throw DomainError("build_instruments: no markets in the requested period");
    Vec kappa = options.kappa;
    if (options.kind == InstrumentKind::gh_local && kappa.size() == 0) {
      kappa = pooled_characteristic_sd(panel, set.markets);
    }
    for (std::size_t m : set.markets) {
      const Market& mk = panel.markets[m];
      switch (options.kind) {
        case InstrumentKind::cost_shock:
          set.values.push_back(mk.recentered_shock());
          break;
        case InstrumentKind::blp_sum:
          set.values.push_back(blp_sum_iv(mk));
          break;
        case InstrumentKind::gh_quadratic:
          set.values.push_back(gh_differentiation_iv(mk, GhVariant::quadratic));
          break;
        case InstrumentKind::gh_local:
          set.values.push_back(gh_differentiation_iv(mk, GhVariant::local, kappa));
          break;
        default:
          break;
      }
    }
    return set;
  }

  options.check.validate();
  const auto pairs = region_pairs(panel, options.period - 1, options.period);
  if (pairs.empty()) throw DomainError("build_instruments: no region observed in both periods");
  const double pi_check =
      std::isnan(options.pi_check) ? estimate_pass_through(panel, options.period - 1, options.period).pi_check
                                   : options.pi_check;
  set.alpha_check = options.check.alpha;
  set.sigma_check = options.check.sigma;
  set.pi_check = pi_check;

  std::vector<ShareKernel<double>> kernels;
  std::vector<Vec> lagged_delta;
  kernels.reserve(pairs.size());
  for (const auto& rp : pairs) {
    const Market& pre = panel.markets[rp.pre];
    set.markets.push_back(rp.post);
    kernels.emplace_back(pre.x1, options.check.sigma, draws.nu);
    lagged_delta.push_back(invert_shares(pre.s, pre.s0, kernels.back(), options.inversion).delta);
  }

  if (options.kind == InstrumentKind::reciv_ssiv) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const SsivWeights w =
          ssiv_weights_at(kernels[i], options.check.sigma, lagged_delta[i], options.check.alpha, pi_check);
      set.values.push_back(build_ssiv(panel.markets[pairs[i].post], w));
    }
    return set;
  }

  std::vector<Vec> actual;
  for (const auto& rp : pairs) actual.push_back(panel.markets[rp.post].recentered_shock());
  const ShockPermutations perms = draw_permutations(actual, options.permutations, options.scope, options.seed);
  set.permutations = options.permutations;
  set.scope = options.scope;
  const ShockFormula formula = [&](std::size_t m, const Vec& g) -> Mat {
    const Mat dsig =
        fiv_prediction_at(kernels[m], options.check.sigma, lagged_delta[m], options.check.alpha, pi_check, g);
    Mat z(g.size(), 1 + dsig.cols());
    z.col(0) = -pi_check * g;
    z.rightCols(dsig.cols()) = dsig;
    return z;
  };
  set.values = recenter_by_permutation(formula, actual, perms);
  return set;
}

}  // namespace reciv
