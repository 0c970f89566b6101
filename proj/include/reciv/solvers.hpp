#pragma once

// Numerical kernels shared by every model: low-discrepancy sequences,
// accelerated fixed-point iteration, Gauss-Newton and BFGS minimizers, and
// central finite differences.

#include <functional>
#include <string>

#include "reciv/types.hpp"

namespace reciv {

enum class Acceleration { plain, squarem };

struct FixedPointConfig {
  double tolerance = kInversionTolerance;
  int max_iterations = 10000;
  Acceleration acceleration = Acceleration::squarem;

  void validate() const;
};

enum class SolverMethod { fixed_point_plain, fixed_point_squarem, newton, gauss_newton, quasi_newton_fallback };

const char* to_string(SolverMethod method);

struct OptimizerReport {
  bool converged = false;
  int iterations = 0;
  double final_step_norm = 0.0;
  double final_gradient_norm = 0.0;
  double objective = 0.0;
  SolverMethod method_used = SolverMethod::gauss_newton;
  std::string message;
};

// ---------------------------------------------------------------------------
// Sequences

/// Number of prime bases available to `halton_draws`.
inline constexpr int kMaxHaltonDims = 16;

/// Halton points with index skip+1, ..., skip+count (index 0 is the origin).
///
/// With `scramble` the radical-inverse digits of every base b are permuted by
/// the Kocis-Whiten reverse-radix (RR2) permutation. RR2 is deterministic, so
/// `seed` does not change the output; it is kept so callers can record it.
Mat halton_draws(int dims, int count, int skip, bool scramble, std::uint64_t seed = 0);

/// The RR2 digit permutation for base `base`: bit-reversed integers below the
/// next power of two, filtered to those smaller than `base`.
std::vector<int> reverse_radix_permutation(int base);

/// Quantile function of the standard normal distribution.
double normal_inverse_cdf(double u);

/// Points n = 1..n_points of the generalized golden-ratio (R_d) sequence,
/// x_n = frac(0.5 + n * phi_d^{-(k+1)}), mapped into the box [lower, upper].
Mat rd_grid(int n_points, int dims, const Vec& lower, const Vec& upper);

// ---------------------------------------------------------------------------
// Fixed points and minimizers

using VectorMap = std::function<Vec(const Vec&)>;
using MatrixMap = std::function<Mat(const Vec&)>;
using ScalarMap = std::function<double(const Vec&)>;

struct FixedPointResult {
  Vec x;
  OptimizerReport report;
};

/// Iterates `map` to a fixed point; `iterations` counts map evaluations.
///
/// The squarem scheme uses the squared extrapolation with step length
/// -sqrt(r'r / v'v) clamped to <= -1, followed by one stabilizing map step. An
/// extrapolation whose residual exceeds that of the plain double step is
/// replaced by the plain double step. Throws DivergedError on a non-finite
/// iterate.
FixedPointResult accelerated_fixed_point(const VectorMap& map, const Vec& start,
                                         const FixedPointConfig& config);

struct MinimizeResult {
  Vec x;
  OptimizerReport report;
};

/// Gauss-Newton regression for min 1/2 h' W h.
///
/// Each step is b = -(H'WH)^{-1} H'W h. Stops once |b| <= step_tol (converged)
/// or after max_iter steps. Throws RankError when H'WH is singular and Error
/// when the moments turn non-finite.
MinimizeResult gauss_newton(const VectorMap& moments, const MatrixMap& jacobian, const Mat& weight,
                            const Vec& start, double step_tol = kStepTolerance,
                            int max_iter = 100);

/// BFGS with central finite-difference gradients and a backtracking line
/// search using cubic interpolation. Converges when the gradient sup-norm is
/// at most grad_tol; a failed line search ends the run with converged=false.
MinimizeResult quasi_newton(const ScalarMap& objective, const Vec& start,
                            double grad_tol = kGradientTolerance, int max_iter = 500);

enum class StepRule { central };

/// Central-difference Jacobian with step h_i = cbrt(eps) * max(1, |x_i|).
Mat finite_difference_jacobian(const VectorMap& f, const Vec& x, StepRule rule = StepRule::central);

/// Central-difference Jacobian with a caller-chosen relative step.
Mat finite_difference_jacobian(const VectorMap& f, const Vec& x, double relative_step);

/// Central-difference gradient of a scalar function.
Vec finite_difference_gradient(const ScalarMap& f, const Vec& x);

}  // namespace reciv
