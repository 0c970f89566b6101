#include "reciv/dgp.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "reciv/error.hpp"

namespace reciv {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::baseline: return "baseline";
    case Scenario::shock_sweep: return "shock_sweep";
    case Scenario::common_products: return "common_products";
    case Scenario::bliss_point: return "bliss_point";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& name) {
  if (name == "baseline") return Scenario::baseline;
  if (name == "shock_sweep" || name == "shock-sweep") return Scenario::shock_sweep;
  if (name == "common_products" || name == "common-products" || name == "common-sweep") {
    return Scenario::common_products;
  }
  if (name == "bliss_point" || name == "bliss") return Scenario::bliss_point;
  throw DomainError("unknown scenario '" + name + "'");
}

void DgpConfig::validate() const {
  if (n_regions < 1 || n_products < 1 || n_periods < 1 || L1 < 1 || dgp_draws < 1) {
    throw DomainError("dgp: counts must be positive");
  }
  if (sigma_true.size() != L1) throw DomainError("dgp: sigma_true must have L1 entries");
  if (beta.size() != L1 + 1 || gamma.size() != L1 + 1) throw DomainError("dgp: beta and gamma need L1 + 1 entries");
  if (!(alpha_true < 0.0)) throw DomainError("dgp: alpha must be negative");
  if (!(shock_sd >= 0.0)) throw DomainError("dgp: shock_sd must be nonnegative");
  if (!(ar_coef > -1.0 && ar_coef < 1.0)) throw DomainError("dgp: ar_coef must lie in (-1, 1)");
  if (common_products < 0 || common_products > n_products) {
    throw DomainError("dgp: common_products must lie in [0, n_products]");
  }
}

std::mt19937_64 substream(std::uint64_t master, SeedStream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master & 0xffffffffu), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Pricing

namespace {

struct PriceDerivatives {
  Vec s;
  Mat dsdp;  // alpha * (diag(s) - PP'/R)
};

PriceDerivatives price_derivatives(const Vec& p, const Vec& delta_exogenous, double alpha,
                                   const ShareKernel<double>& kernel) {
  const Vec delta = delta_exogenous + alpha * p;
  const Mat P = kernel.individual(delta);
  const double inv_r = 1.0 / static_cast<double>(kernel.consumers());
  PriceDerivatives d;
  d.s = P.rowwise().sum() * inv_r;
  d.dsdp = alpha * (Mat(d.s.asDiagonal()) - P * P.transpose() * inv_r);
  return d;
}

Vec foc_from(const Vec& p, const Vec& costs, const PriceDerivatives& d, Ownership ownership) {
  if (ownership == Ownership::single_product) {
    return p - costs + d.s.cwiseQuotient(d.dsdp.diagonal());
  }
  return p - costs + d.dsdp.partialPivLu().solve(d.s);
}

}  // namespace

Vec pricing_foc_residual(const Vec& p, const Vec& costs, const Vec& delta_exogenous, double alpha,
                         const ShareKernel<double>& kernel, Ownership ownership) {
  return foc_from(p, costs, price_derivatives(p, delta_exogenous, alpha, kernel), ownership);
}

PricingResult solve_prices(const Vec& costs, const Vec& delta_exogenous, const Theta& theta, const Mat& x1,
                           const ConsumerDraws& draws, const PricingConfig& config) {
  theta.validate();
  const Eigen::Index J = costs.size();
  if (delta_exogenous.size() != J || x1.rows() != J) throw DomainError("solve_prices: inconsistent product counts");
  const ShareKernel<double> kernel(x1, theta.sigma, draws.nu);
  const double alpha = theta.alpha;
  const double inv_r = 1.0 / static_cast<double>(draws.count());

  // Markup map: p <- c + Lambda^{-1} (Omega o Gamma)(p - c) - Lambda^{-1} S,
  // Lambda = diag(alpha s), Gamma = alpha PP'/R.
  const VectorMap zeta = [&](const Vec& p) -> Vec {
    const Mat P = kernel.individual(delta_exogenous + alpha * p);
    const Vec s = P.rowwise().sum() * inv_r;
    const Vec lambda = alpha * s;
    const Vec markup = p - costs;
    Vec gamma_markup;
    if (config.ownership == Ownership::single_product) {
      gamma_markup = alpha * P.array().square().rowwise().sum().matrix() * inv_r;
      gamma_markup = gamma_markup.cwiseProduct(markup);
    } else {
      gamma_markup = alpha * (P * (P.transpose() * markup)) * inv_r;
    }
    return costs + (gamma_markup - s).cwiseQuotient(lambda);
  };

  PricingResult result;
  const Vec start = (costs.array() - 1.0 / alpha).matrix();
  Vec candidate = start;
  try {
    FixedPointConfig fp_config;
    fp_config.tolerance = config.tolerance;
    fp_config.max_iterations = config.max_iterations;
    fp_config.acceleration = Acceleration::squarem;
    const FixedPointResult fp = accelerated_fixed_point(zeta, start, fp_config);
    if (fp.x.allFinite()) candidate = fp.x;
  } catch (const Error&) {
    candidate = start;
  }
  const auto accept = [&](const Vec& p, double residual) {
    return p.allFinite() && residual <= config.foc_tolerance && ((p - costs).array() > 0.0).all();
  };
  const auto residual_of = [&](const Vec& p) -> double {
    const Vec r = pricing_foc_residual(p, costs, delta_exogenous, alpha, kernel, config.ownership);
    return r.allFinite() ? r.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  };

  double residual = residual_of(candidate);
  if (accept(candidate, residual)) {
    result.p = candidate;
    result.ok = true;
    result.foc_residual = residual;
    result.method = SolverMethod::fixed_point_squarem;
    return result;
  }

  // Damped Newton on the first-order conditions.
  const VectorMap foc = [&](const Vec& p) -> Vec {
    return pricing_foc_residual(p, costs, delta_exogenous, alpha, kernel, config.ownership);
  };
  Vec p = std::isfinite(residual) ? candidate : start;
  double norm = residual_of(p);
  if (!std::isfinite(norm)) {
    p = start;
    norm = residual_of(p);
  }
  for (int it = 0; it < config.newton_iterations && std::isfinite(norm) && norm > config.foc_tolerance; ++it) {
    Mat jac;
    try {
      jac = finite_difference_jacobian(foc, p, StepRule::central);
    } catch (const Error&) {
      break;
    }
    const Eigen::PartialPivLU<Mat> lu(jac);
    const Vec step = -lu.solve(foc(p));
    if (!step.allFinite()) break;
    double t = 1.0;
    bool moved = false;
    for (int half = 0; half < 30; ++half, t *= 0.5) {
      const Vec trial = p + t * step;
      const double trial_norm = residual_of(trial);
      if (trial_norm < norm) {
        p = trial;
        norm = trial_norm;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  result.used_fallback = true;
  result.method = SolverMethod::gauss_newton;
  result.p = p;
  result.foc_residual = norm;
  result.ok = accept(p, norm);
  if (!result.ok) {
    std::ostringstream msg;
    msg << "pricing failed: first-order residual " << norm;
    result.message = msg.str();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Simulation

void apply_bliss_point(double bliss, Vec& x_first, Mat& xi, double penalty) {
  if (xi.rows() != x_first.size()) throw DomainError("apply_bliss_point: xi and x disagree on J");
  const Vec penalty_term = penalty * x_first.array().square();
  xi.colwise() -= penalty_term;
  x_first.array() += bliss;
}

Mat ar1_paths(std::mt19937_64& rng, int regions, int J, int periods, double rho) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double innovation = std::sqrt(1.0 - rho * rho);
  Mat out(static_cast<Eigen::Index>(regions) * J, periods);
  for (Eigen::Index row = 0; row < out.rows(); ++row) {
    out(row, 0) = normal(rng);
    for (int t = 1; t < periods; ++t) out(row, t) = rho * out(row, t - 1) + innovation * normal(rng);
  }
  return out;
}

SimulatedPanel simulate_panel(const DgpConfig& config, const PricingConfig& pricing) {
  config.validate();
  const int R = config.n_regions;
  const int J = config.n_products;
  const int T = config.n_periods;
  const int L1 = config.L1;
  std::normal_distribution<double> normal(0.0, 1.0);

  SimulatedPanel out;
  out.truth = config;

  {
    std::mt19937_64 rng = substream(config.seed, SeedStream::draws);
    out.dgp_draws.nu.resize(config.dgp_draws, L1);
    for (int i = 0; i < config.dgp_draws; ++i) {
      for (int l = 0; l < L1; ++l) out.dgp_draws.nu(i, l) = normal(rng);
    }
    out.dgp_draws.source = DrawSource::pseudo_random;
    out.dgp_draws.seed = config.seed;
  }

  // Characteristics: rows (region, product), time invariant.
  Mat chars(static_cast<Eigen::Index>(R) * J, L1);
  {
    std::mt19937_64 rng = substream(config.seed, SeedStream::characteristics);
    for (Eigen::Index row = 0; row < chars.rows(); ++row) {
      for (int l = 0; l < L1; ++l) chars(row, l) = normal(rng);
    }
  }
  if (config.scenario == Scenario::common_products) {
    for (int r = 1; r < R; ++r) {
      for (int j = 0; j < config.common_products; ++j) {
        chars.row(static_cast<Eigen::Index>(r) * J + j) = chars.row(j);
      }
    }
  }

  Mat xi, omega;
  {
    std::mt19937_64 rng = substream(config.seed, SeedStream::xi);
    xi = ar1_paths(rng, R, J, T, config.ar_coef);
  }
  {
    std::mt19937_64 rng = substream(config.seed, SeedStream::omega);
    omega = ar1_paths(rng, R, J, T, config.ar_coef);
  }
  Mat shocks = Mat::Zero(static_cast<Eigen::Index>(R) * J, T);
  {
    std::mt19937_64 rng = substream(config.seed, SeedStream::shocks);
    for (Eigen::Index row = 0; row < shocks.rows(); ++row) {
      for (int t = 1; t < T; ++t) shocks(row, t) = config.shock_sd * normal(rng);
    }
  }
  if (config.scenario == Scenario::bliss_point) {
    std::mt19937_64 rng = substream(config.seed, SeedStream::bliss);
    out.bliss.resize(R);
    for (int r = 0; r < R; ++r) {
      out.bliss(r) = normal(rng);
      Vec x_first = chars.block(static_cast<Eigen::Index>(r) * J, 0, J, 1);
      Mat xi_r = xi.block(static_cast<Eigen::Index>(r) * J, 0, J, T);
      apply_bliss_point(out.bliss(r), x_first, xi_r, config.bliss_penalty);
      chars.block(static_cast<Eigen::Index>(r) * J, 0, J, 1) = x_first;
      xi.block(static_cast<Eigen::Index>(r) * J, 0, J, T) = xi_r;
    }
  }

  Theta theta;
  theta.alpha = config.alpha_true;
  theta.sigma = config.sigma_true;
  for (int r = 0; r < R; ++r) {
    const Eigen::Index first = static_cast<Eigen::Index>(r) * J;
    Mat x(J, L1 + 1);
    x.col(0).setOnes();
    x.rightCols(L1) = chars.middleRows(first, J);
    const Mat x1 = x.rightCols(L1);
    for (int t = 0; t < T; ++t) {
      const Vec xi_rt = xi.block(first, t, J, 1);
      const Vec om_rt = omega.block(first, t, J, 1);
      const Vec g = shocks.block(first, t, J, 1);
      const Vec costs = x * config.gamma + om_rt + g;
      const Vec delta_exo = x * config.beta + xi_rt;
      const PricingResult priced = solve_prices(costs, delta_exo, theta, x1, out.dgp_draws, pricing);
      if (!priced.ok) {
        out.panel.dropped.push_back({r + 1, t + 1, priced.message});
        continue;
      }
      Market m;
      m.region = r + 1;
      m.period = t + 1;
      m.x = x;
      m.x1 = x1;
      m.p = priced.p;
      m.s = shares(delta_exo + theta.alpha * priced.p, theta.sigma, x1, out.dgp_draws, &m.s0);
      m.g = g;
      m.g_mean = Vec::Zero(J);
      if (!(m.s.array() > 0.0).all() || !(m.s0 > 0.0)) {
        out.panel.dropped.push_back({r + 1, t + 1, "nonpositive simulated share"});
        continue;
      }
      out.panel.markets.push_back(std::move(m));
      out.xi.push_back(xi_rt);
      out.omega.push_back(om_rt);
    }
  }
  return out;
}

}  // namespace reciv
