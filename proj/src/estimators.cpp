#include "reciv/estimators.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "reciv/error.hpp"

namespace reciv {

// ---------------------------------------------------------------------------
// Transforms

Transformed transform_softplus(double a) {
  Transformed t;
  if (a > 0.0) {
    const double e = std::exp(-a);
    t.value = a + std::log1p(e);
    t.derivative = 1.0 / (1.0 + e);
  } else {
    const double e = std::exp(a);
    t.value = std::log1p(e);
    t.derivative = e / (1.0 + e);
  }
  return t;
}

double softplus(double a) { return transform_softplus(a).value; }

double softplus_inverse(double y) {
  if (!(y > 0.0) || !std::isfinite(y)) throw DomainError("softplus_inverse: argument must be positive and finite");
  if (y > 30.0) return y + std::log(-std::expm1(-y));
  return std::log(std::expm1(y));
}

// ---------------------------------------------------------------------------
// Linear pieces

namespace {

Mat checked_inverse(const Mat& A, const std::string& what) {
  Eigen::JacobiSVD<Mat> svd(A);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || !(sv(sv.size() - 1) > 1e-12 * sv(0))) {
    throw RankError(what + ": matrix is singular");
  }
  return A.ldlt().solve(Mat::Identity(A.rows(), A.cols()));
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Vec to_sigma(const Vec& raw) {
  Vec s(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) s(i) = softplus(raw(i));
  return s;
}

Vec sigma_slopes(const Vec& raw) {
  Vec s(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) s(i) = transform_softplus(raw(i)).derivative;
  return s;
}

Vec to_raw(const Vec& sigma) {
  Vec r(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) r(i) = softplus_inverse(std::max(sigma(i), 1e-12));
  return r;
}

Mat demean(const Mat& m) { return m.rowwise() - m.colwise().mean(); }

std::vector<double> key_of(const Vec& v) { return {v.data(), v.data() + v.size()}; }

// Warm-started inversions keyed by sigma. Grid points come from the shared
// cold-start cache (or a cold start) so that they do not depend on history.
class DeltaStore {
 public:
  DeltaStore(const Panel& panel, const ConsumerDraws& draws, InversionConfig config,
             std::vector<std::size_t> markets, InversionCache* shared)
      : panel_(panel), draws_(draws), cold_(config), warm_(config), markets_(std::move(markets)), shared_(shared) {
    if (warm_.newton_after > 10) warm_.newton_after = 10;
  }

  const std::vector<std::size_t>& markets() const { return markets_; }

  const std::vector<Vec>& at(const Vec& sigma, bool grid) {
    const auto key = key_of(sigma);
    auto it = states_.find(key);
    if (it != states_.end()) return it->second;

    const std::vector<Vec>* near = nullptr;
    if (!grid) {
      double best = 1.0;
      for (const auto& [k, v] : states_) {
        double d = 0.0;
        for (std::size_t i = 0; i < k.size(); ++i) d += (k[i] - key[i]) * (k[i] - key[i]);
        d = std::sqrt(d);
        if (d <= best) {
          best = d;
          near = &v;
        }
      }
    }
    std::vector<Vec> out;
    out.reserve(markets_.size());
    for (std::size_t i = 0; i < markets_.size(); ++i) {
      const Market& mk = panel_.markets[markets_[i]];
      if (grid && shared_) {
        out.push_back(shared_->delta(markets_[i], sigma));
      } else if (near) {
        const ShareKernel<double> kernel(mk.x1, sigma, draws_.nu);
        out.push_back(invert_shares(mk.s, mk.s0, kernel, warm_, &(*near)[i]).delta);
      } else {
        const ShareKernel<double> kernel(mk.x1, sigma, draws_.nu);
        out.push_back(invert_shares(mk.s, mk.s0, kernel, cold_).delta);
      }
    }
    return states_.emplace(key, std::move(out)).first->second;
  }

 private:
  const Panel& panel_;
  const ConsumerDraws& draws_;
  InversionConfig cold_, warm_;
  std::vector<std::size_t> markets_;
  InversionCache* shared_;
  std::map<std::vector<double>, std::vector<Vec>> states_;
};

struct GridPick {
  Vec sigma;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  double objective = std::numeric_limits<double>::infinity();
};

Mat sigma_grid(const EstimatorOptions& options, Eigen::Index L1) {
  if (options.grid_points < 1) throw DomainError("estimator: grid_points must be positive");
  return rd_grid(options.grid_points, static_cast<int>(L1), Vec::Zero(L1), Vec::Constant(L1, options.grid_upper));
}

// Gauss-Newton from `start`; BFGS on the same objective from `start` when GN
// fails, stalls, or stops at a point whose gradient is not small.
struct StageOutcome {
  Vec x;
  OptimizerReport report;
  bool fallback = false;
  std::string reason;
};

StageOutcome minimize_with_fallback(const VectorMap& moments, const MatrixMap& jacobian, const Mat& W,
                                    const Vec& start, const EstimatorOptions& options) {
  StageOutcome out;
  try {
    MinimizeResult gn = gauss_newton(moments, jacobian, W, start, options.step_tolerance, options.max_iterations);
    if (gn.report.converged && gn.report.final_gradient_norm <= options.gradient_tolerance) {
      out.x = gn.x;
      out.report = gn.report;
      return out;
    }
    out.reason = gn.report.converged ? "gradient above tolerance at the Gauss-Newton solution"
                                     : "Gauss-Newton iteration limit";
  } catch (const Error& e) {
    out.reason = e.what();
  }
  out.fallback = true;
  const ScalarMap objective = [&](const Vec& x) {
    try {
      const Vec h = moments(x);
      const double q = 0.5 * h.dot(W * h);
      return std::isfinite(q) ? q : std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  try {
    MinimizeResult qn = quasi_newton(objective, start, options.gradient_tolerance, options.fallback_iterations);
    out.x = qn.x;
    out.report = qn.report;
  } catch (const Error& e) {
    out.x = start;
    out.report = OptimizerReport{};
    out.report.method_used = SolverMethod::quasi_newton_fallback;
    out.report.message = e.what();
  }
  if (out.report.message.empty()) out.report.message = "fallback after: " + out.reason;
  return out;
}

}  // namespace

Vec concentrate_linear(const Vec& y, const Mat& X, const Mat& Z, const Mat& W, const std::string& what) {
  if (X.rows() != y.size() || Z.rows() != y.size() || W.rows() != Z.cols() || W.cols() != Z.cols()) {
    throw DomainError("concentrate_linear: dimension mismatch");
  }
  const Mat ZX = Z.transpose() * X;
  const Mat A = ZX.transpose() * W * ZX;
  return checked_inverse(A, what) * (ZX.transpose() * W * (Z.transpose() * y));
}

Mat concentrated_moment_operator(const Mat& X, const Mat& Z, const Mat& W, const std::string& what) {
  if (X.rows() != Z.rows() || W.rows() != Z.cols() || W.cols() != Z.cols()) {
    throw DomainError("concentrated_moment_operator: dimension mismatch");
  }
  const Mat ZX = Z.transpose() * X;
  const Mat A = ZX.transpose() * W * ZX;
  const Mat Ainv = checked_inverse(A, what);
  return Z.transpose() - ZX * Ainv * ZX.transpose() * W * Z.transpose();
}

// ---------------------------------------------------------------------------
// Inversion cache

InversionCache::InversionCache(const Panel& panel, const ConsumerDraws& draws, InversionConfig config)
    : panel_(panel), draws_(draws), config_(config) {}

const Vec& InversionCache::delta(std::size_t market, const Vec& sigma) {
  auto key = std::make_pair(market, key_of(sigma));
  auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  const Market& mk = panel_.markets.at(market);
  const ShareKernel<double> kernel(mk.x1, sigma, draws_.nu);
  Vec d = invert_shares(mk.s, mk.s0, kernel, config_).delta;
  return values_.emplace(std::move(key), std::move(d)).first->second;
}

// ---------------------------------------------------------------------------
// Names

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::char_blp: return "char-blp";
    case EstimatorKind::char_gh_quadratic: return "char-gh-quad";
    case EstimatorKind::char_gh_local: return "char-gh-local";
    case EstimatorKind::reciv_ssiv: return "reciv-ssiv";
    case EstimatorKind::reciv_fiv: return "reciv-fiv";
  }
  return "unknown";
}

EstimatorKind estimator_kind_from_string(const std::string& name) {
  for (auto k : {EstimatorKind::char_blp, EstimatorKind::char_gh_quadratic, EstimatorKind::char_gh_local,
                 EstimatorKind::reciv_ssiv, EstimatorKind::reciv_fiv}) {
    if (to_string(k) == name) return k;
  }
  throw DomainError("unknown estimator '" + name + "'");
}

std::string to_string(RecenteredMode mode) {
  return mode == RecenteredMode::iterative ? "iterative" : "cu";
}

RecenteredMode recentered_mode_from_string(const std::string& name) {
  if (name == "cu") return RecenteredMode::continuously_updating;
  if (name == "iterative") return RecenteredMode::iterative;
  throw DomainError("unknown estimation mode '" + name + "'");
}

std::string to_string(Clustering c) { return c == Clustering::by_shock ? "shock" : "market"; }

Clustering clustering_from_string(const std::string& name) {
  if (name == "market") return Clustering::by_market;
  if (name == "shock") return Clustering::by_shock;
  throw DomainError("unknown clustering '" + name + "'");
}

InstrumentKind instrument_kind_of(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::char_blp: return InstrumentKind::blp_sum;
    case EstimatorKind::char_gh_quadratic: return InstrumentKind::gh_quadratic;
    case EstimatorKind::char_gh_local: return InstrumentKind::gh_local;
    case EstimatorKind::reciv_ssiv: return InstrumentKind::reciv_ssiv;
    case EstimatorKind::reciv_fiv: return InstrumentKind::reciv_fiv;
  }
  return InstrumentKind::reciv_ssiv;
}

bool is_recentered(EstimatorKind kind) {
  return kind == EstimatorKind::reciv_ssiv || kind == EstimatorKind::reciv_fiv;
}

std::vector<std::string> EstimationResult::parameter_names() const {
  std::vector<std::string> names{"alpha"};
  for (Eigen::Index l = 0; l < theta_hat.sigma.size(); ++l) names.push_back("sigma" + std::to_string(l + 1));
  for (Eigen::Index k = 0; k < beta_hat.size(); ++k) names.push_back("beta" + std::to_string(k));
  return names;
}

// ---------------------------------------------------------------------------
// Inference

ShockResiduals aggregate_shock_residuals(const std::vector<SsivWeights>& weights, const std::vector<Vec>& shocks,
                                         const std::vector<Vec>& residuals) {
  if (weights.size() != shocks.size() || weights.size() != residuals.size()) {
    throw DomainError("aggregate_shock_residuals: inputs differ in market count");
  }
  ShockResiduals out;
  for (std::size_t m = 0; m < weights.size(); ++m) {
    const Vec& e = residuals[m];
    const Eigen::Index J = e.size();
    const auto L1 = static_cast<Eigen::Index>(weights[m].w.size());
    if (shocks[m].size() != J) throw DomainError("aggregate_shock_residuals: shock length mismatch");
    Mat r(J, 1 + L1);
    r.col(0) = -weights[m].pi_check * e;
    for (Eigen::Index l = 0; l < L1; ++l) {
      const Mat& w = weights[m].w[static_cast<std::size_t>(l)];
      if (w.rows() != J || w.cols() != J) throw DomainError("aggregate_shock_residuals: weight size mismatch");
      r.col(l + 1) = w.transpose() * e;
    }
    if (out.total.size() == 0) out.total = Vec::Zero(1 + L1);
    if (out.total.size() != 1 + L1) throw DomainError("aggregate_shock_residuals: markets differ in L1");
    out.total += r.transpose() * shocks[m];
    out.residual.push_back(std::move(r));
  }
  return out;
}

StandardErrors sandwich_standard_errors(const Mat& G, const Mat& W, const Mat& cluster_scores, Eigen::Index N,
                                        Clustering clustering) {
  if (G.rows() != W.rows() || W.rows() != W.cols() || cluster_scores.rows() != G.rows()) {
    throw DomainError("sandwich_standard_errors: dimension mismatch");
  }
  if (cluster_scores.cols() < G.cols()) {
    throw DomainError("sandwich_standard_errors: " + std::to_string(cluster_scores.cols()) +
                      " clusters for " + std::to_string(G.cols()) + " parameters");
  }
  const double n = static_cast<double>(N);
  const Mat omega = cluster_scores * cluster_scores.transpose() / n;
  const Mat bread = checked_inverse(G.transpose() * W * G, "sandwich_standard_errors: G'WG");
  StandardErrors out;
  out.clustering = clustering;
  out.clusters = static_cast<int>(cluster_scores.cols());
  out.covariance = bread * G.transpose() * W * omega * W * G * bread / n;
  out.se = out.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  return out;
}

// ---------------------------------------------------------------------------
// Characteristic-IV estimation

namespace {

class CharIvProblem {
 public:
  CharIvProblem(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind, const EstimatorOptions& options,
                InversionCache* shared)
      : panel_(panel),
        draws_(draws),
        markets_(panel.in_period(2)),
        store_(panel, draws, options.inversion, markets_, shared) {
    if (markets_.empty()) throw DomainError("estimate_char_iv: no period-2 markets");
    InstrumentOptions io;
    io.kind = instrument_kind_of(kind);
    io.period = 2;
    io.kappa = options.kappa;
    const InstrumentSet iv = build_instruments(panel, draws, io);

    const Market& first = panel.markets[markets_.front()];
    L1_ = first.x1.cols();
    const Eigen::Index K = first.x.cols();
    const Eigen::Index Kiv = iv.columns();
    for (std::size_t m : markets_) N_ += panel.markets[m].n_products();
    X_.resize(N_, 1 + K);
    Z_.resize(N_, 1 + K + Kiv);
    offset_.reserve(markets_.size());
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < markets_.size(); ++i) {
      const Market& mk = panel.markets[markets_[i]];
      const Eigen::Index J = mk.n_products();
      offset_.push_back(row);
      X_.block(row, 0, J, 1) = mk.p;
      X_.block(row, 1, J, K) = mk.x;
      Z_.block(row, 0, J, 1) = mk.recentered_shock();
      Z_.block(row, 1, J, K) = mk.x;
      Z_.block(row, 1 + K, J, Kiv) = iv.values[i];
      row += J;
    }
    W_ = checked_inverse(Z_.transpose() * Z_ / static_cast<double>(N_), "estimate_char_iv: Z'Z");
    M_ = concentrated_moment_operator(X_, Z_, W_, "estimate_char_iv: X'ZWZ'X");
  }

  Eigen::Index n_sigma() const { return L1_; }
  Eigen::Index observations() const { return N_; }
  const Mat& weight() const { return W_; }
  const Mat& X() const { return X_; }
  const Mat& Z() const { return Z_; }
  const std::vector<std::size_t>& markets() const { return markets_; }
  const std::vector<Eigen::Index>& offsets() const { return offset_; }

  Vec delta(const Vec& sigma, bool grid = false) {
    const auto& d = store_.at(sigma, grid);
    Vec out(N_);
    for (std::size_t i = 0; i < d.size(); ++i) out.segment(offset_[i], d[i].size()) = d[i];
    return out;
  }

  Mat delta_jacobian(const Vec& sigma) {
    const auto key = key_of(sigma);
    auto it = dsigma_.find(key);
    if (it != dsigma_.end()) return it->second;
    const auto& d = store_.at(sigma, false);
    Mat out(N_, L1_);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Market& mk = panel_.markets[markets_[i]];
      const ShareKernel<double> kernel(mk.x1, sigma, draws_.nu);
      out.middleRows(offset_[i], d[i].size()) = inversion_derivatives_at(kernel, sigma, d[i], false).dsigma;
    }
    return dsigma_.emplace(key, std::move(out)).first->second;
  }

  Vec moments(const Vec& sigma, bool grid = false) { return M_ * delta(sigma, grid) / static_cast<double>(N_); }
  Mat moment_jacobian(const Vec& sigma) { return M_ * delta_jacobian(sigma) / static_cast<double>(N_); }

 private:
  const Panel& panel_;
  const ConsumerDraws& draws_;
  std::vector<std::size_t> markets_;
  DeltaStore store_;
  Eigen::Index L1_ = 0;
  Eigen::Index N_ = 0;
  std::vector<Eigen::Index> offset_;
  Mat X_, Z_, W_, M_;
  std::map<std::vector<double>, Mat> dsigma_;
};

StandardErrors char_iv_standard_errors(CharIvProblem& problem, const EstimationResult& r, Clustering clustering) {
  if (clustering == Clustering::by_shock) {
    throw DomainError("shock-clustered standard errors are only defined for recentered estimators");
  }
  const Vec& sigma = r.theta_hat.sigma;
  const Mat& X = problem.X();
  const Mat& Z = problem.Z();
  Vec coef(X.cols());
  coef(0) = r.theta_hat.alpha;
  coef.tail(X.cols() - 1) = r.beta_hat;
  const Vec xi = problem.delta(sigma) - X * coef;
  const Eigen::Index L1 = sigma.size();
  const Eigen::Index P = X.cols() + L1;
  Mat dxi(X.rows(), P);
  dxi.col(0) = -X.col(0);
  dxi.middleCols(1, L1) = problem.delta_jacobian(sigma);
  dxi.rightCols(X.cols() - 1) = -X.rightCols(X.cols() - 1);
  const double n = static_cast<double>(problem.observations());
  const Mat G = Z.transpose() * dxi / n;
  const auto& offs = problem.offsets();
  Mat scores(Z.cols(), static_cast<Eigen::Index>(offs.size()));
  for (std::size_t i = 0; i < offs.size(); ++i) {
    const Eigen::Index end = i + 1 < offs.size() ? offs[i + 1] : X.rows();
    const Eigen::Index J = end - offs[i];
    scores.col(static_cast<Eigen::Index>(i)) =
        Z.middleRows(offs[i], J).transpose() * xi.segment(offs[i], J);
  }
  return sandwich_standard_errors(G, problem.weight(), scores, problem.observations(), clustering);
}

}  // namespace

EstimationResult estimate_char_iv(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                  const EstimatorOptions& options, InversionCache* shared) {
  if (is_recentered(kind)) throw DomainError("estimate_char_iv: " + to_string(kind) + " is not a characteristic IV");
  const auto t0 = std::chrono::steady_clock::now();
  CharIvProblem problem(panel, draws, kind, options, shared);
  const Eigen::Index L1 = problem.n_sigma();
  const double n = static_cast<double>(problem.observations());
  const Mat& W = problem.weight();

  EstimationResult r;
  r.estimator = kind;

  Vec sigma0;
  if (options.start) {
    sigma0 = options.start->sigma;
  } else {
    const Mat grid = sigma_grid(options, L1);
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      const Vec s = grid.row(i).transpose();
      try {
        const Vec h = problem.moments(s, true);
        const double q = 0.5 * h.dot(W * h);
        if (q < best) {
          best = q;
          sigma0 = s;
        }
      } catch (const Error&) {
      }
    }
    if (sigma0.size() == 0) {
      r.report.message = "no grid point could be evaluated";
      r.wall_time = elapsed_since(t0);
      return r;
    }
  }
  r.grid_start = sigma0;

  const VectorMap h = [&](const Vec& raw) { return problem.moments(to_sigma(raw)); };
  const MatrixMap H = [&](const Vec& raw) {
    return Mat(problem.moment_jacobian(to_sigma(raw)) * sigma_slopes(raw).asDiagonal());
  };
  const StageOutcome st = minimize_with_fallback(h, H, W, to_raw(sigma0), options);
  r.report = st.report;
  r.fallback_used = st.fallback;
  r.fallback_reason = st.reason;
  const Vec sigma = to_sigma(st.x);
  try {
    const Vec coef = concentrate_linear(problem.delta(sigma), problem.X(), problem.Z(), W);
    r.theta_hat.alpha = coef(0);
    r.theta_hat.sigma = sigma;
    r.beta_hat = coef.tail(coef.size() - 1);
    r.moments = problem.moments(sigma);
    r.objective = 0.5 * r.moments.dot(W * r.moments);
  } catch (const Error& e) {
    r.report.converged = false;
    r.report.message = e.what();
  }
  if (options.standard_errors && r.report.converged) {
    try {
      r.se = char_iv_standard_errors(problem, r, options.clustering);
    } catch (const Error& e) {
      r.se_error = e.what();
    }
  }
  (void)n;
  r.wall_time = elapsed_since(t0);
  return r;
}

// ---------------------------------------------------------------------------
// Recentered objective

struct RecenteredObjective::Impl {
  Impl(const Panel& p, const ConsumerDraws& d, InstrumentKind k, const EstimatorOptions& o,
       std::vector<std::size_t> markets, InversionCache* shared)
      : panel(p), draws(d), kind(k), options(o), store(p, d, o.inversion, std::move(markets), shared) {}

  const Panel& panel;
  const ConsumerDraws& draws;
  InstrumentKind kind;
  EstimatorOptions options;
  DeltaStore store;  // markets: all pre, then all post
  Eigen::Index L1 = 0;
  std::vector<RegionPair> pairs;
  std::vector<Eigen::Index> offset;
  std::vector<Vec> actual;
  Vec dp, g;
  double pi = 0.0;
  ShockPermutations permutations;
  Vec fiv_price;
  std::map<std::vector<double>, Mat> exposure;  // -[dS/d delta']^{-1} T_l g~ stacked (N x L1)
  std::map<std::vector<double>, Mat> jacobian;

  std::size_t n_pairs() const { return pairs.size(); }
  const Vec& pre(const std::vector<Vec>& d, std::size_t i) const { return d[i]; }
  const Vec& post(const std::vector<Vec>& d, std::size_t i) const { return d[pairs.size() + i]; }
  const Market& pre_market(std::size_t i) const { return panel.markets[pairs[i].pre]; }
  const Market& post_market(std::size_t i) const { return panel.markets[pairs[i].post]; }
};

namespace {

std::vector<std::size_t> pair_markets(const std::vector<RegionPair>& pairs) {
  std::vector<std::size_t> out;
  for (const auto& rp : pairs) out.push_back(rp.pre);
  for (const auto& rp : pairs) out.push_back(rp.post);
  return out;
}

}  // namespace

RecenteredObjective::RecenteredObjective(const Panel& panel, const ConsumerDraws& draws, InstrumentKind kind,
                                         const EstimatorOptions& options, InversionCache* shared) {
  if (!is_recentered(kind)) throw DomainError("RecenteredObjective: " + to_string(kind) + " is not recentered");
  const auto pairs = region_pairs(panel, 1, 2);
  if (pairs.empty()) throw DomainError("RecenteredObjective: no region observed in both periods");
  impl_ = std::make_unique<Impl>(panel, draws, kind, options, pair_markets(pairs), shared);
  Impl& s = *impl_;
  s.pairs = pairs;
  s.L1 = panel.markets[pairs.front().post].x1.cols();
  Eigen::Index n = 0;
  for (const auto& rp : pairs) {
    s.offset.push_back(n);
    n += panel.markets[rp.post].n_products();
  }
  s.dp.resize(n);
  s.g.resize(n);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Market& pre = s.pre_market(i);
    const Market& post = s.post_market(i);
    const Eigen::Index J = post.n_products();
    s.dp.segment(s.offset[i], J) = post.p - pre.p;
    s.actual.push_back(post.recentered_shock());
    s.g.segment(s.offset[i], J) = s.actual.back();
  }
  if (s.g.cwiseAbs().maxCoeff() == 0.0) {
    throw RankError("recentered instruments: the cost shocks are identically zero");
  }
  if (std::isnan(options.pi_check)) {
    try {
      s.pi = estimate_pass_through(s.dp, s.g).pi_check;
    } catch (const DomainError& e) {
      throw RankError(std::string("recentered instruments: ") + e.what());
    }
  } else {
    s.pi = options.pi_check;
  }
  if (kind == InstrumentKind::reciv_fiv) {
    if (options.permutations < 1) throw DomainError("formula instruments need at least one permutation");
    s.permutations = draw_permutations(s.actual, options.permutations, options.scope, options.permutation_seed);
    const double pi = s.pi;
    const ShockFormula price = [pi](std::size_t, const Vec& g) -> Mat { return Mat(-pi * g); };
    const auto cols = recenter_by_permutation(price, s.actual, s.permutations);
    s.fiv_price.resize(n);
    for (std::size_t i = 0; i < cols.size(); ++i) s.fiv_price.segment(s.offset[i], cols[i].rows()) = cols[i].col(0);
  }
}

RecenteredObjective::~RecenteredObjective() = default;
RecenteredObjective::RecenteredObjective(RecenteredObjective&&) noexcept = default;
RecenteredObjective& RecenteredObjective::operator=(RecenteredObjective&&) noexcept = default;

Eigen::Index RecenteredObjective::observations() const { return impl_->dp.size(); }
Eigen::Index RecenteredObjective::n_sigma() const { return impl_->L1; }
double RecenteredObjective::pi_check() const { return impl_->pi; }
InstrumentKind RecenteredObjective::kind() const { return impl_->kind; }
const std::vector<RegionPair>& RecenteredObjective::pairs() const { return impl_->pairs; }
const std::vector<Eigen::Index>& RecenteredObjective::offsets() const { return impl_->offset; }
const Vec& RecenteredObjective::price_change() const { return impl_->dp; }
const Vec& RecenteredObjective::shocks() const { return impl_->g; }

Vec RecenteredObjective::delta_change(const Vec& sigma, bool grid) {
  Impl& s = *impl_;
  const auto& d = s.store.at(sigma, grid);
  Vec out(s.dp.size());
  for (std::size_t i = 0; i < s.n_pairs(); ++i) out.segment(s.offset[i], s.post(d, i).size()) = s.post(d, i) - s.pre(d, i);
  return out;
}

Mat RecenteredObjective::delta_change_jacobian(const Vec& sigma) {
  Impl& s = *impl_;
  const auto key = key_of(sigma);
  auto it = s.jacobian.find(key);
  if (it != s.jacobian.end()) return it->second;
  const auto& d = s.store.at(sigma, false);
  Mat out(s.dp.size(), s.L1);
  for (std::size_t i = 0; i < s.n_pairs(); ++i) {
    const Market& pre = s.pre_market(i);
    const Market& post = s.post_market(i);
    const ShareKernel<double> kpre(pre.x1, sigma, s.draws.nu);
    const ShareKernel<double> kpost(post.x1, sigma, s.draws.nu);
    out.middleRows(s.offset[i], post.n_products()) =
        inversion_derivatives_at(kpost, sigma, s.post(d, i), false).dsigma -
        inversion_derivatives_at(kpre, sigma, s.pre(d, i), false).dsigma;
  }
  return s.jacobian.emplace(key, std::move(out)).first->second;
}

Mat RecenteredObjective::instruments(double alpha, const Vec& sigma, bool grid) {
  Impl& s = *impl_;
  const Eigen::Index N = s.dp.size();
  Mat z(N, 1 + s.L1);
  const auto& d = s.store.at(sigma, grid);

  if (s.kind == InstrumentKind::reciv_ssiv) {
    const auto key = key_of(sigma);
    auto it = s.exposure.find(key);
    if (it == s.exposure.end()) {
      Mat e(N, s.L1);
      for (std::size_t i = 0; i < s.n_pairs(); ++i) {
        const Market& pre = s.pre_market(i);
        const ShareKernel<double> kernel(pre.x1, sigma, s.draws.nu);
        const SsivWeights w = ssiv_weights_at(kernel, sigma, s.pre(d, i), 1.0, 1.0);
        for (Eigen::Index l = 0; l < s.L1; ++l) {
          e.block(s.offset[i], l, s.actual[i].size(), 1) = w.w[static_cast<std::size_t>(l)] * s.actual[i];
        }
      }
      it = s.exposure.emplace(key, std::move(e)).first;
    }
    z.col(0) = -s.pi * s.g;
    z.rightCols(s.L1) = (alpha * s.pi) * it->second;
    return z;
  }

  std::vector<ShareKernel<double>> kernels;
  kernels.reserve(s.n_pairs());
  for (std::size_t i = 0; i < s.n_pairs(); ++i) kernels.emplace_back(s.pre_market(i).x1, sigma, s.draws.nu);
  const double pi = s.pi;
  const ShockFormula formula = [&](std::size_t m, const Vec& g) -> Mat {
    return fiv_prediction_at(kernels[m], sigma, s.pre(d, m), alpha, pi, g);
  };
  const auto cols = recenter_by_permutation(formula, s.actual, s.permutations);
  z.col(0) = s.fiv_price;
  for (std::size_t i = 0; i < cols.size(); ++i) z.block(s.offset[i], 1, cols[i].rows(), s.L1) = cols[i];
  return z;
}

Vec RecenteredObjective::moments(double alpha, const Vec& sigma, bool grid) {
  const Vec dxi = delta_change(sigma, grid) - alpha * impl_->dp;
  return instruments(alpha, sigma, grid).transpose() * dxi / static_cast<double>(impl_->dp.size());
}

double RecenteredObjective::iv_slope(const Vec& sigma, bool grid) {
  const Vec dd = delta_change(sigma, grid);
  const Vec gc = demean(impl_->g);
  const double den = gc.dot(impl_->dp);
  if (den == 0.0 || !std::isfinite(den)) throw RankError("iv_slope: shocks are uncorrelated with price changes");
  return gc.dot(dd) / den;
}

std::vector<SsivWeights> RecenteredObjective::shock_weights(double alpha, const Vec& sigma) {
  Impl& s = *impl_;
  const auto& d = s.store.at(sigma, false);
  std::vector<SsivWeights> out;
  for (std::size_t i = 0; i < s.n_pairs(); ++i) {
    const ShareKernel<double> kernel(s.pre_market(i).x1, sigma, s.draws.nu);
    out.push_back(ssiv_weights_at(kernel, sigma, s.pre(d, i), alpha, s.pi));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recentered estimation

namespace {

struct RecenteredStart {
  double alpha = std::numeric_limits<double>::quiet_NaN();
  Vec sigma;
};

// Grid over sigma with alpha(sigma) the IV slope; the minimizer of the
// objective at (alpha(sigma), sigma) is the start.
std::optional<RecenteredStart> recentered_grid(RecenteredObjective& obj, const EstimatorOptions& options) {
  if (options.start) return RecenteredStart{options.start->alpha, options.start->sigma};
  const Mat grid = sigma_grid(options, obj.n_sigma());
  std::optional<RecenteredStart> best;
  double best_q = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    const Vec s = grid.row(i).transpose();
    try {
      const double a = obj.iv_slope(s, true);
      const Vec h = obj.moments(a, s, true);
      const double q = 0.5 * h.squaredNorm();
      if (q < best_q) {
        best_q = q;
        best = RecenteredStart{a, s};
      }
    } catch (const RankError&) {
      throw;
    } catch (const Error&) {
    }
  }
  return best;
}

constexpr double kMaxStartAlpha = -1e-3;

StandardErrors recentered_standard_errors(RecenteredObjective& obj, const Theta& theta, bool demeaned,
                                          Clustering clustering) {
  const Vec& sigma = theta.sigma;
  const double alpha = theta.alpha;
  const Eigen::Index N = obj.observations();
  const Eigen::Index L1 = obj.n_sigma();
  Mat Z = obj.instruments(alpha, sigma);
  Vec dxi = obj.delta_change(sigma) - alpha * obj.price_change();
  Mat dxi_dtheta(N, 1 + L1);
  dxi_dtheta.col(0) = -obj.price_change();
  dxi_dtheta.rightCols(L1) = obj.delta_change_jacobian(sigma);
  if (demeaned) {
    Z = demean(Z);
    dxi = demean(dxi);
    dxi_dtheta = demean(dxi_dtheta);
  }
  const Mat G = Z.transpose() * dxi_dtheta / static_cast<double>(N);
  const Mat W = Mat::Identity(Z.cols(), Z.cols());
  const auto& offs = obj.offsets();
  const auto& pairs = obj.pairs();
  Mat scores;
  if (clustering == Clustering::by_market) {
    scores.resize(Z.cols(), static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const Eigen::Index end = i + 1 < offs.size() ? offs[i + 1] : N;
      scores.col(static_cast<Eigen::Index>(i)) =
          Z.middleRows(offs[i], end - offs[i]).transpose() * dxi.segment(offs[i], end - offs[i]);
    }
  } else {
    const std::vector<SsivWeights> w = obj.shock_weights(alpha, sigma);
    std::vector<Vec> shocks, resid;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const Eigen::Index end = i + 1 < offs.size() ? offs[i + 1] : N;
      shocks.push_back(obj.shocks().segment(offs[i], end - offs[i]));
      resid.push_back(dxi.segment(offs[i], end - offs[i]));
    }
    const ShockResiduals agg = aggregate_shock_residuals(w, shocks, resid);
    scores.resize(1 + L1, N);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const Eigen::Index J = shocks[i].size();
      scores.middleCols(offs[i], J) = (agg.residual[i].array().colwise() * shocks[i].array()).matrix().transpose();
    }
  }
  return sandwich_standard_errors(G, W, scores, N, clustering);
}

void finish_recentered(EstimationResult& r, RecenteredObjective& obj, bool demeaned, const EstimatorOptions& options) {
  try {
    r.moments = obj.moments(r.theta_hat.alpha, r.theta_hat.sigma);
    if (demeaned) {
      const Mat Z = demean(obj.instruments(r.theta_hat.alpha, r.theta_hat.sigma));
      const Vec dxi = demean(obj.delta_change(r.theta_hat.sigma) - r.theta_hat.alpha * obj.price_change());
      r.moments = Z.transpose() * dxi / static_cast<double>(obj.observations());
    }
    r.objective = 0.5 * r.moments.squaredNorm();
  } catch (const Error& e) {
    r.report.converged = false;
    r.report.message = e.what();
  }
  if (options.standard_errors && r.report.converged) {
    try {
      r.se = recentered_standard_errors(obj, r.theta_hat, demeaned, options.clustering);
    } catch (const Error& e) {
      r.se_error = e.what();
    }
  }
}

}  // namespace

EstimationResult estimate_cu_recentered(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                        const EstimatorOptions& options, InversionCache* shared) {
  if (!is_recentered(kind)) throw DomainError("estimate_cu_recentered: " + to_string(kind) + " is not recentered");
  const auto t0 = std::chrono::steady_clock::now();
  RecenteredObjective obj(panel, draws, instrument_kind_of(kind), options, shared);
  const Eigen::Index L1 = obj.n_sigma();
  EstimationResult r;
  r.estimator = kind;
  r.mode = RecenteredMode::continuously_updating;
  r.pi_check = obj.pi_check();

  const auto start = recentered_grid(obj, options);
  if (!start) {
    r.report.message = "no grid point could be evaluated";
    r.wall_time = elapsed_since(t0);
    return r;
  }
  r.grid_start.resize(1 + L1);
  r.grid_start << start->alpha, start->sigma;

  Vec raw0(1 + L1);
  raw0(0) = softplus_inverse(-std::min(start->alpha, kMaxStartAlpha));
  raw0.tail(L1) = to_raw(start->sigma);
  const VectorMap h = [&](const Vec& raw) { return obj.moments(-softplus(raw(0)), to_sigma(raw.tail(L1))); };
  const MatrixMap H = [&](const Vec& raw) { return finite_difference_jacobian(h, raw); };
  const Mat W = Mat::Identity(1 + L1, 1 + L1);
  const StageOutcome st = minimize_with_fallback(h, H, W, raw0, options);
  r.report = st.report;
  r.fallback_used = st.fallback;
  r.fallback_reason = st.reason;
  r.theta_hat.alpha = -softplus(st.x(0));
  r.theta_hat.sigma = to_sigma(st.x.tail(L1));
  finish_recentered(r, obj, false, options);
  r.wall_time = elapsed_since(t0);
  return r;
}

EstimationResult estimate_iterative_recentered(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                                               const EstimatorOptions& options, InversionCache* shared) {
  if (!is_recentered(kind)) {
    throw DomainError("estimate_iterative_recentered: " + to_string(kind) + " is not recentered");
  }
  const auto t0 = std::chrono::steady_clock::now();
  RecenteredObjective obj(panel, draws, instrument_kind_of(kind), options, shared);
  const Eigen::Index L1 = obj.n_sigma();
  const double n = static_cast<double>(obj.observations());
  EstimationResult r;
  r.estimator = kind;
  r.mode = RecenteredMode::iterative;
  r.pi_check = obj.pi_check();

  const auto start = recentered_grid(obj, options);
  if (!start) {
    r.report.message = "no grid point could be evaluated";
    r.wall_time = elapsed_since(t0);
    return r;
  }
  r.grid_start.resize(1 + L1);
  r.grid_start << start->alpha, start->sigma;

  const Mat X = demean(obj.price_change());
  const Mat I = Mat::Identity(1 + L1, 1 + L1);
  double alpha = start->alpha;
  Vec sigma = start->sigma;
  bool outer_converged = false;
  for (int outer = 1; outer <= options.max_outer; ++outer) {
    r.outer_iterations = outer;
    Mat Z;
    Mat M;
    try {
      Z = demean(obj.instruments(alpha, sigma));
      M = concentrated_moment_operator(X, Z, I, "iterative estimation: X'ZZ'X");
    } catch (const RankError&) {
      throw;
    } catch (const Error& e) {
      r.report.converged = false;
      r.report.message = e.what();
      break;
    }
    const VectorMap h = [&](const Vec& raw) { return Vec(M * obj.delta_change(to_sigma(raw)) / n); };
    const MatrixMap H = [&](const Vec& raw) {
      return Mat(M * obj.delta_change_jacobian(to_sigma(raw)) * sigma_slopes(raw).asDiagonal() / n);
    };
    const StageOutcome st = minimize_with_fallback(h, H, I, to_raw(sigma), options);
    r.report = st.report;
    if (st.fallback) {
      r.fallback_used = true;
      r.fallback_reason = st.reason;
    }
    const Vec next = to_sigma(st.x);
    double next_alpha;
    try {
      next_alpha = concentrate_linear(demean(obj.delta_change(next)), X, Z, I)(0);
    } catch (const Error& e) {
      r.report.converged = false;
      r.report.message = e.what();
      break;
    }
    const double change = (next - sigma).norm();
    sigma = next;
    alpha = next_alpha;
    if (!st.report.converged) break;
    if (change <= options.step_tolerance) {
      outer_converged = true;
      break;
    }
  }
  r.theta_hat.alpha = alpha;
  r.theta_hat.sigma = sigma;
  if (!outer_converged && r.report.converged) {
    r.report.converged = false;
    r.report.message = "outer iteration limit reached";
  }
  finish_recentered(r, obj, true, options);
  r.wall_time = elapsed_since(t0);
  return r;
}

EstimationResult estimate(const Panel& panel, const ConsumerDraws& draws, EstimatorKind kind,
                          const EstimatorOptions& options, InversionCache* shared) {
  if (!is_recentered(kind)) return estimate_char_iv(panel, draws, kind, options, shared);
  if (options.mode == RecenteredMode::iterative) {
    return estimate_iterative_recentered(panel, draws, kind, options, shared);
  }
  return estimate_cu_recentered(panel, draws, kind, options, shared);
}

StandardErrors gmm_standard_errors(const EstimationResult& result, const Panel& panel, const ConsumerDraws& draws,
                                   Clustering clustering, const EstimatorOptions& options) {
  if (!is_recentered(result.estimator)) {
    if (clustering == Clustering::by_shock) {
      throw DomainError("shock-clustered standard errors are only defined for recentered estimators");
    }
    CharIvProblem problem(panel, draws, result.estimator, options, nullptr);
    return char_iv_standard_errors(problem, result, clustering);
  }
  EstimatorOptions o = options;
  o.pi_check = result.pi_check;
  RecenteredObjective obj(panel, draws, instrument_kind_of(result.estimator), o, nullptr);
  return recentered_standard_errors(obj, result.theta_hat, result.mode == RecenteredMode::iterative, clustering);
}

}  // namespace reciv
