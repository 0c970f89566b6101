#include "reciv/mixedlogit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "reciv/error.hpp"

namespace reciv {

// ---------------------------------------------------------------------------
// Draws

ConsumerDraws scrambled_halton_draws(int count, int dims, int skip) {
  const Mat u = halton_draws(dims, count, skip, /*scramble=*/true);
  ConsumerDraws draws;
  draws.nu = u.unaryExpr([](double v) { return normal_inverse_cdf(v); });
  draws.source = DrawSource::scrambled_halton;
  return draws;
}

ConsumerDraws pseudo_random_draws(int count, int dims, std::uint64_t seed) {
  if (count < 1 || dims < 1) throw DomainError("pseudo_random_draws: count and dims must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ConsumerDraws draws;
  draws.nu.resize(count, dims);
  for (int i = 0; i < count; ++i) {
    for (int l = 0; l < dims; ++l) draws.nu(i, l) = normal(rng);
  }
  draws.source = DrawSource::pseudo_random;
  draws.seed = seed;
  return draws;
}

ConsumerDraws standardized_draws(const Mat& raw) {
  const Eigen::Index R = raw.rows();
  if (R < 2) throw DomainError("standardized_draws: need at least two draws");
  const Mat centered = raw.rowwise() - raw.colwise().mean();
  const Mat cov = centered.transpose() * centered / static_cast<double>(R);
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw RankError("standardized_draws: singular draw covariance");
  // centered * L^{-T} has identity sample covariance.
  const Mat L = llt.matrixL();
  ConsumerDraws draws;
  draws.nu = L.triangularView<Eigen::Lower>().solve(centered.transpose()).transpose();
  draws.source = DrawSource::custom;
  return draws;
}

// ---------------------------------------------------------------------------
// Shares and inversion

namespace {

void check_open_simplex(const Vec& s, double s0) {
  if (!(s0 > 0.0) || !(s.array() > 0.0).all()) {
    throw DomainError("share inversion: shares must be strictly positive (zero shares are rejected)");
  }
  const double total = s0 + s.sum();
  if (std::abs(total - 1.0) > 1e-8) {
    std::ostringstream msg;
    msg << "share inversion: shares sum to " << total << ", not 1";
    throw DomainError(msg.str());
  }
}

}  // namespace

Vec shares(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws,
           double* outside) {
  if (delta.size() != x1.rows()) throw DomainError("shares: delta and x1 disagree on J");
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return kernel.shares(delta, outside);
}

Vec logit_shares(const Vec& delta, double* outside) {
  const double top = std::max(0.0, delta.maxCoeff());
  const Vec e = (delta.array() - top).exp().matrix();
  const double e0 = std::exp(-top);
  const double denom = e0 + e.sum();
  if (outside) *outside = e0 / denom;
  return e / denom;
}

namespace {

// Damped Newton on F(delta) = log S(delta) - log s with dF/d delta' =
// diag(1/S) (diag(S) - P P'/R). Steps are halved until the sup-norm residual
// drops.
bool newton_inversion(const ShareKernel<double>& kernel, const Vec& log_s, double tolerance, int max_steps,
                      Vec& delta, OptimizerReport& report) {
  const double inv_r = 1.0 / static_cast<double>(kernel.consumers());
  auto residual = [&](const Vec& d) -> Vec { return kernel.shares(d).array().log().matrix() - log_s; };
  Vec F = residual(delta);
  double norm = F.allFinite() ? F.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  if (!std::isfinite(norm)) return false;
  for (int step = 0; step < max_steps; ++step) {
    if (norm <= tolerance) {
      report.final_step_norm = norm;
      return true;
    }
    const Mat P = kernel.individual(delta);
    const Vec S = P.rowwise().sum() * inv_r;
    Mat J = -(P * P.transpose()) * inv_r;
    J.diagonal() += S;
    J = S.cwiseInverse().asDiagonal() * J;
    const Vec dir = -J.partialPivLu().solve(F);
    if (!dir.allFinite()) return false;
    double t = 1.0;
    bool moved = false;
    for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
      const Vec trial = delta + t * dir;
      const Vec Ft = residual(trial);
      if (!Ft.allFinite()) continue;
      const double nt = Ft.cwiseAbs().maxCoeff();
      if (nt < norm) {
        delta = trial;
        F = Ft;
        norm = nt;
        moved = true;
        break;
      }
    }
    ++report.iterations;
    if (!moved) break;
  }
  report.final_step_norm = norm;
  return norm <= tolerance;
}

// Full Newton steps after the stopping rule is met. With a small outside
// share, log S is nearly flat along a common shift of delta, so a residual at
// the tolerance still leaves delta loose by about tolerance / s0.
void polish_inversion(const ShareKernel<double>& kernel, const Vec& log_s, double tolerance, int steps, Vec& delta) {
  const double inv_r = 1.0 / static_cast<double>(kernel.consumers());
  for (int step = 0; step < steps; ++step) {
    const Mat P = kernel.individual(delta);
    const Vec S = P.rowwise().sum() * inv_r;
    const Vec F = S.array().log().matrix() - log_s;
    Mat J = -(P * P.transpose()) * inv_r;
    J.diagonal() += S;
    J = S.cwiseInverse().asDiagonal() * J;
    const Vec trial = delta - J.partialPivLu().solve(F);
    if (!trial.allFinite()) return;
    const Vec Ft = kernel.shares(trial).array().log().matrix() - log_s;
    if (!Ft.allFinite() || Ft.cwiseAbs().maxCoeff() > tolerance) return;
    delta = trial;
  }
}

}  // namespace

InversionResult invert_shares(const Vec& s, double s0, const ShareKernel<double>& kernel,
                              const InversionConfig& config, const Vec* start) {
  check_open_simplex(s, s0);
  if (s.size() != kernel.products()) throw DomainError("invert_shares: shares and x1 disagree on J");
  const Vec log_s = s.array().log().matrix();

  InversionResult result;
  Vec delta0 = start ? *start : Vec((log_s.array() - std::log(s0)).matrix());
  auto map = [&](const Vec& delta) -> Vec {
    const Vec predicted = kernel.shares(delta);
    return delta + log_s - predicted.array().log().matrix();
  };
  FixedPointConfig contraction = config.contraction;
  const bool newton = config.newton_after >= 0;
  if (newton) contraction.max_iterations = std::min(contraction.max_iterations, std::max(config.newton_after, 1));
  FixedPointResult fp;
  try {
    fp = accelerated_fixed_point(map, delta0, contraction);
  } catch (const DivergedError& e) {
    if (!newton) throw;
    fp.x = e.last_finite().size() == delta0.size() ? Vec(e.last_finite()) : delta0;
    fp.report.converged = false;
    fp.report.iterations = contraction.max_iterations;
    fp.report.final_step_norm = std::numeric_limits<double>::infinity();
  }
  if (fp.report.converged) {
    if (newton) polish_inversion(kernel, log_s, config.contraction.tolerance, config.polish_steps, fp.x);
    result.delta = std::move(fp.x);
    result.report = fp.report;
    return result;
  }
  if (newton) {
    OptimizerReport report = fp.report;
    report.method_used = SolverMethod::newton;
    const Vec logit = (log_s.array() - std::log(s0)).matrix();
    for (const Vec* from : std::array<const Vec*, 3>{&fp.x, &delta0, &logit}) {
      if (!from->allFinite()) continue;
      Vec delta = *from;
      if (newton_inversion(kernel, log_s, config.contraction.tolerance, config.newton_max_steps, delta, report)) {
        report.converged = true;
        polish_inversion(kernel, log_s, config.contraction.tolerance, config.polish_steps, delta);
        result.delta = std::move(delta);
        result.report = report;
        return result;
      }
      if (std::isfinite(report.final_step_norm)) break;
    }
    fp.report.final_step_norm = std::min(fp.report.final_step_norm, report.final_step_norm);
    fp.report.iterations = report.iterations;
  }
  std::ostringstream msg;
  msg << "invert_shares: no convergence after " << fp.report.iterations
      << " iterations (residual " << fp.report.final_step_norm << ")";
  throw ConvergenceError(msg.str(), fp.report.final_step_norm);
}

InversionResult invert_shares(const Vec& s, double s0, const Vec& sigma, const Mat& x1,
                              const ConsumerDraws& draws, const InversionConfig& config,
                              const Vec* start) {
  check_open_simplex(s, s0);
  if (sigma.size() != x1.cols()) throw DomainError("invert_shares: sigma and x1 disagree on L1");
  if ((sigma.array() == 0.0).all()) {
    InversionResult closed;
    closed.delta = (s.array().log() - std::log(s0)).matrix();
    closed.report.converged = true;
    closed.report.method_used = SolverMethod::fixed_point_plain;
    return closed;
  }
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return invert_shares(s, s0, kernel, config, start);
}

// ---------------------------------------------------------------------------
// Share derivatives

ShareDerivatives share_derivatives(const ShareKernel<double>& kernel, const Vec& sigma,
                                   const Vec& delta, bool with_tensors) {
  const Eigen::Index J = kernel.products();
  const Eigen::Index R = kernel.consumers();
  const Eigen::Index L1 = sigma.size();
  const double inv_r = 1.0 / static_cast<double>(R);
  const Mat& x1 = kernel.x1();
  const Mat& nu = kernel.nu();

  Vec outside;
  const Mat P = kernel.individual(delta, &outside);  // J x R

  ShareDerivatives d;
  d.s = P.rowwise().sum() * inv_r;
  d.s0 = outside.sum() * inv_r;
  const Mat PPt = P * P.transpose() * inv_r;
  d.jacobian = Mat(d.s.asDiagonal()) - PPt;

  // D_l(j, i) = s_ji (x_jl - xbar_il)
  std::vector<Mat> dev(static_cast<std::size_t>(L1));
  d.dsigma.resize(J, L1);
  for (Eigen::Index l = 0; l < L1; ++l) {
    const Vec xbar = P.transpose() * x1.col(l);  // R
    Mat D = P.array() * (x1.col(l).replicate(1, R).rowwise() - xbar.transpose()).array();
    d.dsigma.col(l) = D * nu.col(l) * inv_r;
    dev[static_cast<std::size_t>(l)] = std::move(D);
  }
  if (!with_tensors) return d;

  d.hessian.resize(static_cast<std::size_t>(J));
  for (Eigen::Index k = 0; k < J; ++k) {
    // W(j, i) = s_ji s_ki
    const Mat W = P.array().rowwise() * P.row(k).array();
    Mat Hk = -2.0 * (-W * P.transpose() * inv_r);
    Hk.row(k) += d.jacobian.row(k);
    Hk.col(k) -= PPt.col(k);
    Hk.diagonal() -= W.rowwise().sum() * inv_r;
    d.hessian[static_cast<std::size_t>(k)] = std::move(Hk);
  }

  d.cross.resize(static_cast<std::size_t>(L1));
  for (Eigen::Index l = 0; l < L1; ++l) {
    const Mat& D = dev[static_cast<std::size_t>(l)];
    const Mat Dnu = D * nu.col(l).asDiagonal();  // J x R
    const Mat Pnu = P * nu.col(l).asDiagonal();
    Mat X = -(Dnu * P.transpose() + Pnu * D.transpose()) * inv_r;
    X.diagonal() += d.dsigma.col(l);
    d.cross[static_cast<std::size_t>(l)] = std::move(X);
  }
  return d;
}

Mat share_jacobian_delta(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws) {
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return share_derivatives(kernel, sigma, delta, false).jacobian;
}

Mat share_dsigma(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws) {
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return share_derivatives(kernel, sigma, delta, false).dsigma;
}

Tensor3 share_hessian_delta(const Vec& delta, const Vec& sigma, const Mat& x1,
                            const ConsumerDraws& draws) {
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return share_derivatives(kernel, sigma, delta, true).hessian;
}

Tensor3 share_cross_sigma_delta(const Vec& delta, const Vec& sigma, const Mat& x1,
                                const ConsumerDraws& draws) {
  const ShareKernel<double> kernel(x1, sigma, draws.nu);
  return share_derivatives(kernel, sigma, delta, true).cross;
}

Mat share_jacobian_direction(const ShareKernel<double>& kernel, const Vec& delta, const Vec& v_delta,
                             const Vec& v_sigma) {
  const Eigen::Index R = kernel.consumers();
  const double inv_r = 1.0 / static_cast<double>(R);
  const Mat& x1 = kernel.x1();
  const Mat& nu = kernel.nu();
  if (v_delta.size() != delta.size() || v_sigma.size() != x1.cols()) {
    throw DomainError("share_jacobian_direction: direction has the wrong length");
  }
  const Mat P = kernel.individual(delta);
  // dP(j, i) = s_ji [(v_j - vbar_i) + sum_l v_l nu_il (x_jl - xbar_il)]
  Mat rate = v_delta.replicate(1, R).rowwise() - (P.transpose() * v_delta).transpose();
  for (Eigen::Index l = 0; l < x1.cols(); ++l) {
    if (v_sigma(l) == 0.0) continue;
    const Vec xbar = P.transpose() * x1.col(l);
    const Mat dev = x1.col(l).replicate(1, R).rowwise() - xbar.transpose();
    rate += v_sigma(l) * (dev * nu.col(l).asDiagonal());
  }
  const Mat dP = P.cwiseProduct(rate);
  const Mat cross = dP * P.transpose() * inv_r;
  Mat out = -(cross + cross.transpose());
  out.diagonal() += dP.rowwise().sum() * inv_r;
  return out;
}

// ---------------------------------------------------------------------------
// Inverse-demand derivatives

InversionDerivatives inversion_derivatives_at(const ShareKernel<double>& kernel, const Vec& sigma,
                                              const Vec& delta, bool with_cross) {
  const ShareDerivatives sd = share_derivatives(kernel, sigma, delta, false);

  // Condition of the row-equilibrated jacobian diag(1/s) dS/d delta'.
  const Mat scaled = sd.s.cwiseInverse().asDiagonal() * sd.jacobian;
  Eigen::PartialPivLU<Mat> scaled_lu(scaled);
  const double rcond = scaled_lu.rcond();
  if (!(rcond >= kMinReciprocalCondition)) {
    std::ostringstream msg;
    msg << "inversion_derivatives: share jacobian is near singular (reciprocal condition " << rcond << ")";
    throw ConditioningError(msg.str(), rcond);
  }

  InversionDerivatives out;
  out.delta = delta;
  out.reciprocal_condition = rcond;
  // M^{-1} = scaled^{-1} diag(1/s)
  out.ds = scaled_lu.solve(Mat(sd.s.cwiseInverse().asDiagonal()));
  out.dsigma = -out.ds * sd.dsigma;
  if (!with_cross) return out;

  const Eigen::Index L1 = sigma.size();
  out.dcross.resize(static_cast<std::size_t>(L1));
  for (Eigen::Index l = 0; l < L1; ++l) {
    // Total sigma_l derivative of dS/d delta' along the inversion path.
    const Mat total = share_jacobian_direction(kernel, delta, out.dsigma.col(l), Vec::Unit(L1, l));
    out.dcross[static_cast<std::size_t>(l)] = -out.ds * total * out.ds;
  }
  return out;
}

InversionDerivatives inversion_derivatives(const Market& market, const Theta& theta,
                                           const ConsumerDraws& draws, const InversionConfig& config) {
  const ShareKernel<double> kernel(market.x1, theta.sigma, draws.nu);
  const InversionResult inv = invert_shares(market.s, market.s0, kernel, config);
  return inversion_derivatives_at(kernel, theta.sigma, inv.delta, true);
}

// ---------------------------------------------------------------------------
// Local-to-logit approximation

Mat local_to_logit_coefficients(const Vec& s, const Mat& x1) {
  Mat a(x1.rows(), x1.cols());
  for (Eigen::Index l = 0; l < x1.cols(); ++l) {
    const double xbar = s.dot(x1.col(l));
    a.col(l) = (x1.col(l).array() - xbar).square() - xbar * xbar;
  }
  return a;
}

Vec local_to_logit_inversion(const Vec& s, double s0, const Mat& x1, const Vec& sigma) {
  if (!(s0 > 0.0) || !(s.array() > 0.0).all()) {
    throw DomainError("local_to_logit_inversion: shares must be strictly positive");
  }
  if (sigma.size() != x1.cols()) throw DomainError("local_to_logit_inversion: sigma and x1 disagree on L1");
  const Mat a = local_to_logit_coefficients(s, x1);
  const Vec half_var = 0.5 * sigma.array().square().matrix();
  return (s.array().log() - std::log(s0)).matrix() - a * half_var;
}

Vec local_to_logit_shares(const Vec& delta, const Mat& x1, const Vec& sigma) {
  double s0 = 0.0;
  const Vec s = logit_shares(delta, &s0);
  Vec bracket = Vec::Ones(s.size());
  for (Eigen::Index l = 0; l < x1.cols(); ++l) {
    const double xbar = s.dot(x1.col(l));
    const Vec dev2 = (x1.col(l).array() - xbar).square().matrix();
    // The outside good has x = 0.
    const double spread = s.dot(dev2) + s0 * xbar * xbar;
    bracket += 0.5 * sigma(l) * sigma(l) * (dev2.array() - spread).matrix();
  }
  return s.cwiseProduct(bracket);
}

}  // namespace reciv
