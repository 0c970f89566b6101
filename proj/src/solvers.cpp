#include "reciv/solvers.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "reciv/error.hpp"

namespace reciv {

namespace {

constexpr std::array<int, kMaxHaltonDims> kPrimes = {2,  3,  5,  7,  11, 13, 17, 19,
                                                    23, 29, 31, 37, 41, 43, 47, 53};

bool all_finite(const Vec& v) { return v.allFinite(); }

double sup_norm(const Vec& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

}  // namespace

void FixedPointConfig::validate() const {
  if (!(tolerance > 0.0)) throw DomainError("fixed point tolerance must be positive");
  if (max_iterations < 1) throw DomainError("fixed point max_iterations must be >= 1");
}

const char* to_string(SolverMethod method) {
  switch (method) {
    case SolverMethod::fixed_point_plain:
      return "fixed_point_plain";
    case SolverMethod::fixed_point_squarem:
      return "fixed_point_squarem";
    case SolverMethod::newton:
      return "newton";
    case SolverMethod::gauss_newton:
      return "gauss_newton";
    case SolverMethod::quasi_newton_fallback:
      return "quasi_newton_fallback";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Sequences

std::vector<int> reverse_radix_permutation(int base) {
  int bits = 0;
  while ((1 << bits) < base) ++bits;
  std::vector<int> perm;
  perm.reserve(static_cast<std::size_t>(base));
  for (int i = 0; i < (1 << bits); ++i) {
    int reversed = 0;
    for (int b = 0; b < bits; ++b) {
      if (i & (1 << b)) reversed |= 1 << (bits - 1 - b);
    }
    if (reversed < base) perm.push_back(reversed);
  }
  return perm;
}

Mat halton_draws(int dims, int count, int skip, bool scramble, std::uint64_t /*seed*/) {
  if (dims < 1 || dims > kMaxHaltonDims) {
    throw DomainError("halton_draws: unsupported dimension " + std::to_string(dims) +
                      " (supported 1.." + std::to_string(kMaxHaltonDims) + ")");
  }
  if (count < 1) throw DomainError("halton_draws: count must be positive");
  if (skip < 0) throw DomainError("halton_draws: skip must be nonnegative");

  Mat out(count, dims);
  for (int d = 0; d < dims; ++d) {
    const int base = kPrimes[static_cast<std::size_t>(d)];
    std::vector<int> perm(static_cast<std::size_t>(base));
    if (scramble) {
      perm = reverse_radix_permutation(base);
    } else {
      for (int i = 0; i < base; ++i) perm[static_cast<std::size_t>(i)] = i;
    }
    const double inv_base = 1.0 / base;
    for (int n = 0; n < count; ++n) {
      std::uint64_t index = static_cast<std::uint64_t>(skip) + static_cast<std::uint64_t>(n) + 1;
      double value = 0.0;
      double scale = inv_base;
      while (index > 0) {
        const auto digit = static_cast<std::size_t>(index % static_cast<std::uint64_t>(base));
        value += perm[digit] * scale;
        index /= static_cast<std::uint64_t>(base);
        scale *= inv_base;
      }
      out(n, d) = value;
    }
  }
  return out;
}

double normal_inverse_cdf(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw DomainError("normal_inverse_cdf: argument must lie in (0,1)");
  }
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(standard, u);
}

Mat rd_grid(int n_points, int dims, const Vec& lower, const Vec& upper) {
  if (n_points < 1 || dims < 1) throw DomainError("rd_grid: n_points and dims must be positive");
  if (lower.size() != dims || upper.size() != dims) {
    throw DomainError("rd_grid: box bounds must have length dims");
  }
  if (!((upper - lower).array() > 0.0).all()) throw DomainError("rd_grid: degenerate box");

  // phi_d is the positive root of x^(d+1) = x + 1.
  double phi = 2.0;
  for (int it = 0; it < 100; ++it) {
    const double f = std::pow(phi, dims + 1) - phi - 1.0;
    const double df = (dims + 1) * std::pow(phi, dims) - 1.0;
    const double next = phi - f / df;
    if (std::abs(next - phi) < 1e-16) {
      phi = next;
      break;
    }
    phi = next;
  }
  Vec increments(dims);
  for (int k = 0; k < dims; ++k) increments(k) = std::pow(1.0 / phi, k + 1);

  Mat out(n_points, dims);
  for (int n = 0; n < n_points; ++n) {
    for (int k = 0; k < dims; ++k) {
      double unit = 0.5 + (n + 1) * increments(k);
      unit -= std::floor(unit);
      out(n, k) = lower(k) + (upper(k) - lower(k)) * unit;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed points

FixedPointResult accelerated_fixed_point(const VectorMap& map, const Vec& start,
                                         const FixedPointConfig& config) {
  config.validate();
  if (!all_finite(start)) throw DivergedError("fixed point: non-finite start", start);

  FixedPointResult result;
  OptimizerReport& report = result.report;
  report.method_used = config.acceleration == Acceleration::squarem
                           ? SolverMethod::fixed_point_squarem
                           : SolverMethod::fixed_point_plain;
  int evals = 0;
  Vec x0 = start;

  auto finish = [&](const Vec& x, double residual, bool converged) {
    result.x = x;
    report.converged = converged;
    report.iterations = evals;
    report.final_step_norm = residual;
    return result;
  };
  auto evaluate = [&](const Vec& x) {
    Vec fx = map(x);
    ++evals;
    if (!all_finite(fx)) throw DivergedError("fixed point: map produced a non-finite iterate", x);
    return fx;
  };

  double residual = std::numeric_limits<double>::infinity();
  while (evals < config.max_iterations) {
    const Vec x1 = evaluate(x0);
    const Vec r = x1 - x0;
    residual = sup_norm(r);
    if (residual <= config.tolerance) return finish(x1, residual, true);
    if (config.acceleration == Acceleration::plain || evals >= config.max_iterations) {
      x0 = x1;
      continue;
    }

    const Vec x2 = evaluate(x1);
    const Vec r2 = x2 - x1;
    const double residual2 = sup_norm(r2);
    if (residual2 <= config.tolerance) return finish(x2, residual2, true);
    residual = residual2;

    const Vec v = r2 - r;
    const double v_norm = v.norm();
    if (v_norm == 0.0 || evals >= config.max_iterations) {
      x0 = x2;
      continue;
    }
    const double step = std::min(-r.norm() / v_norm, -1.0);
    const Vec extrapolated = x0 - 2.0 * step * r + step * step * v;
    if (!all_finite(extrapolated)) {
      x0 = x2;
      continue;
    }

    Vec stabilized = map(extrapolated);
    ++evals;
    if (!all_finite(stabilized)) {
      x0 = x2;
      continue;
    }
    const double extrapolated_residual = sup_norm(stabilized - extrapolated);
    if (extrapolated_residual <= config.tolerance) {
      return finish(stabilized, extrapolated_residual, true);
    }
    if (extrapolated_residual > residual2) {
      x0 = x2;
    } else {
      x0 = std::move(stabilized);
      residual = extrapolated_residual;
    }
  }
  return finish(x0, residual, false);
}

// ---------------------------------------------------------------------------
// Minimizers

MinimizeResult gauss_newton(const VectorMap& moments, const MatrixMap& jacobian, const Mat& weight,
                            const Vec& start, double step_tol, int max_iter) {
  MinimizeResult result;
  OptimizerReport& report = result.report;
  report.method_used = SolverMethod::gauss_newton;
  Vec x = start;

  Vec h;
  for (int it = 1; it <= max_iter; ++it) {
    h = moments(x);
    if (!h.allFinite()) throw Error("gauss_newton: non-finite moments at iteration " + std::to_string(it));
    const Mat H = jacobian(x);
    if (!H.allFinite()) throw Error("gauss_newton: non-finite jacobian at iteration " + std::to_string(it));
    const Mat A = H.transpose() * weight * H;
    const Vec gradient = H.transpose() * weight * h;

    Eigen::JacobiSVD<Mat> svd(A);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || !(sv(sv.size() - 1) > 1e-14 * sv(0))) {
      throw RankError("gauss_newton: H'WH is singular (rank deficient moment jacobian)");
    }
    const Vec b = -A.ldlt().solve(gradient);
    x += b;
    report.iterations = it;
    report.final_step_norm = b.norm();
    report.final_gradient_norm = gradient.norm();
    if (report.final_step_norm <= step_tol) {
      report.converged = true;
      break;
    }
  }
  h = moments(x);
  report.objective = h.allFinite() ? 0.5 * h.dot(weight * h) : std::numeric_limits<double>::infinity();
  if (!report.converged) report.message = "iteration limit reached";
  result.x = x;
  return result;
}

namespace {

struct LineSearchOutcome {
  bool ok = false;
  double step = 0.0;
  double value = 0.0;
};

// Backtracking Armijo search; trial steps come from the cubic (or, on the
// first backtrack, quadratic) interpolant of the one-dimensional objective.
LineSearchOutcome backtracking_cubic(const ScalarMap& f, const Vec& x, double f0, const Vec& dir,
                                     double slope, double initial_step) {
  constexpr double c1 = 1e-4;
  constexpr int max_trials = 60;
  double t = initial_step;
  double t_prev = 0.0;
  double f_prev = 0.0;
  for (int trial = 0; trial < max_trials; ++trial) {
    const double ft = f(x + t * dir);
    if (std::isfinite(ft) && ft <= f0 + c1 * t * slope) return {true, t, ft};

    double next;
    if (!std::isfinite(ft)) {
      next = 0.1 * t;
    } else if (trial == 0 || !std::isfinite(f_prev)) {
      next = -slope * t * t / (2.0 * (ft - f0 - slope * t));
    } else {
      const double r1 = ft - f0 - slope * t;
      const double r2 = f_prev - f0 - slope * t_prev;
      const double denom = t - t_prev;
      const double a = (r1 / (t * t) - r2 / (t_prev * t_prev)) / denom;
      const double b = (-t_prev * r1 / (t * t) + t * r2 / (t_prev * t_prev)) / denom;
      if (a == 0.0) {
        next = -slope / (2.0 * b);
      } else {
        const double disc = b * b - 3.0 * a * slope;
        next = disc < 0.0 ? 0.5 * t : (-b + std::sqrt(disc)) / (3.0 * a);
      }
    }
    if (!std::isfinite(next)) next = 0.5 * t;
    next = std::clamp(next, 0.1 * t, 0.5 * t);
    t_prev = t;
    f_prev = ft;
    t = next;
    if (t * dir.norm() < 1e-16 * std::max(1.0, x.norm())) break;
  }
  return {};
}

}  // namespace

MinimizeResult quasi_newton(const ScalarMap& objective, const Vec& start, double grad_tol,
                            int max_iter) {
  MinimizeResult result;
  OptimizerReport& report = result.report;
  report.method_used = SolverMethod::quasi_newton_fallback;

  Vec x = start;
  double fx = objective(x);
  if (!std::isfinite(fx)) throw DomainError("quasi_newton: objective is not finite at the start");
  Vec g = finite_difference_gradient(objective, x);
  const Eigen::Index n = x.size();
  Mat inverse_hessian = Mat::Identity(n, n);
  bool scaled = false;

  report.objective = fx;
  report.final_gradient_norm = sup_norm(g);
  for (int it = 0; it < max_iter; ++it) {
    if (report.final_gradient_norm <= grad_tol) {
      report.converged = true;
      break;
    }
    Vec dir = -inverse_hessian * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      inverse_hessian.setIdentity();
      dir = -g;
      slope = g.dot(dir);
    }
    const double initial = scaled ? 1.0 : std::min(1.0, 1.0 / std::max(1e-12, g.norm()));
    LineSearchOutcome ls = backtracking_cubic(objective, x, fx, dir, slope, initial);
    if (!ls.ok && scaled) {
      // Retry along steepest descent before giving up.
      inverse_hessian.setIdentity();
      dir = -g;
      slope = g.dot(dir);
      ls = backtracking_cubic(objective, x, fx, dir, slope, std::min(1.0, 1.0 / std::max(1e-12, g.norm())));
    }
    if (!ls.ok) {
      report.message = "line search failed";
      break;
    }

    const Vec s = ls.step * dir;
    const Vec x_new = x + s;
    const Vec g_new = finite_difference_gradient(objective, x_new);
    const Vec y = g_new - g;
    const double ys = y.dot(s);
    if (ys > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        inverse_hessian = (ys / y.squaredNorm()) * Mat::Identity(n, n);
        scaled = true;
      }
      const double rho = 1.0 / ys;
      const Mat I = Mat::Identity(n, n);
      inverse_hessian = (I - rho * s * y.transpose()) * inverse_hessian * (I - rho * y * s.transpose()) +
                        rho * s * s.transpose();
    }
    x = x_new;
    fx = ls.value;
    g = g_new;
    report.iterations = it + 1;
    report.final_step_norm = s.norm();
    report.objective = fx;
    report.final_gradient_norm = sup_norm(g);
  }
  if (!report.converged && report.final_gradient_norm <= grad_tol) report.converged = true;
  if (!report.converged && report.message.empty()) report.message = "iteration limit reached";
  result.x = x;
  return result;
}

// ---------------------------------------------------------------------------
// Finite differences

Mat finite_difference_jacobian(const VectorMap& f, const Vec& x, double relative_step) {
  Mat jac;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = relative_step * std::max(1.0, std::abs(x(i)));
    Vec xp = x;
    Vec xm = x;
    xp(i) = x(i) + h;
    xm(i) = x(i) - h;
    const Vec fp = f(xp);
    const Vec fm = f(xm);
    if (!fp.allFinite() || !fm.allFinite()) {
      std::ostringstream msg;
      msg << "finite_difference_jacobian: non-finite evaluation when perturbing coordinate " << i;
      throw Error(msg.str());
    }
    if (i == 0) jac.resize(fp.size(), x.size());
    jac.col(i) = (fp - fm) / (xp(i) - xm(i));
  }
  return jac;
}

Mat finite_difference_jacobian(const VectorMap& f, const Vec& x, StepRule /*rule*/) {
  return finite_difference_jacobian(f, x, std::cbrt(kEpsilon));
}

Vec finite_difference_gradient(const ScalarMap& f, const Vec& x) {
  Vec grad(x.size());
  const double rel = std::cbrt(kEpsilon);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = rel * std::max(1.0, std::abs(x(i)));
    Vec xp = x;
    Vec xm = x;
    xp(i) = x(i) + h;
    xm(i) = x(i) - h;
    const double fp = f(xp);
    const double fm = f(xm);
    grad(i) = (fp - fm) / (xp(i) - xm(i));
  }
  return grad;
}

}  // namespace reciv
