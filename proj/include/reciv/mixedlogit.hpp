#pragma once

// Mixed-logit market shares with normal random coefficients on the non-price
// characteristics, the share inversion, and the derivatives of both.

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

#include "reciv/solvers.hpp"
#include "reciv/types.hpp"

namespace reciv {

enum class DrawSource { scrambled_halton, pseudo_random, custom };

/// Standardized consumer-level draws nu (R x L1); the random coefficient of
/// consumer i on characteristic l is sigma_l * nu(i, l).
struct ConsumerDraws {
  Mat nu;
  DrawSource source = DrawSource::custom;
  std::uint64_t seed = 0;

  Eigen::Index count() const { return nu.rows(); }
  Eigen::Index dims() const { return nu.cols(); }
};

/// Inverse-normal transform of scrambled Halton points (skipping `skip`).
ConsumerDraws scrambled_halton_draws(int count, int dims, int skip = 1000);
/// Independent N(0,1) draws from a seeded Mersenne twister.
ConsumerDraws pseudo_random_draws(int count, int dims, std::uint64_t seed);
/// Affine transform of `raw` to exactly zero sample mean and identity sample
/// covariance (population normalization, 1/R).
ConsumerDraws standardized_draws(const Mat& raw);

/// Per-consumer choice probabilities for one market and one sigma.
///
/// The utility shifts mu(j, i) = sum_l sigma_l nu(i, l) x1(j, l) do not depend
/// on delta, so their exponentials are computed once per (market, sigma);
/// evaluating shares at a new delta then costs J exponentials. Each column is
/// scaled by its largest shift and delta by its maximum before
/// exponentiation, which keeps the computation finite for mean utilities far
/// outside the unit range.
template <typename Scalar>
class ShareKernel {
 public:
  using VecS = VectorX<Scalar>;
  using MatS = MatrixX<Scalar>;

  ShareKernel(const MatS& x1, const VecS& sigma, const MatS& nu) : x1_(x1), nu_(nu) {
    if (x1.cols() != sigma.size() || nu.cols() != sigma.size()) {
      throw_dimension_error();
    }
    const MatS mu = x1 * sigma.asDiagonal() * nu.transpose();  // J x R
    column_max_ = mu.colwise().maxCoeff().transpose();
    exp_mu_ = (mu.rowwise() - column_max_.transpose()).array().exp().matrix();
  }

  Eigen::Index products() const { return x1_.rows(); }
  Eigen::Index consumers() const { return nu_.rows(); }
  const MatS& x1() const { return x1_; }
  const MatS& nu() const { return nu_; }

  /// Choice probabilities (J x R); `outside` receives the R outside-good
  /// probabilities when non-null.
  MatS individual(const VecS& delta, VecS* outside = nullptr) const {
    using std::exp;
    const Eigen::Index J = products();
    const Eigen::Index R = consumers();
    const Scalar shift = delta.maxCoeff();
    const VecS e = (delta.array() - shift).exp().matrix();
    MatS probs = e.asDiagonal() * exp_mu_;
    if (outside) outside->resize(R);
    for (Eigen::Index i = 0; i < R; ++i) {
      const Scalar log_scale = shift + column_max_(i);
      Scalar outside_weight;
      if (log_scale > Scalar(-700) && log_scale < Scalar(700)) {
        outside_weight = exp(-log_scale);
        const Scalar denom = outside_weight + probs.col(i).sum();
        probs.col(i) /= denom;
        outside_weight /= denom;
      } else {
        // Direct log-sum-exp over (0, u_1i, ..., u_Ji) for extreme utilities.
        VecS u(J);
        for (Eigen::Index j = 0; j < J; ++j) u(j) = delta(j) + column_max_(i) + log_of(exp_mu_(j, i));
        const Scalar top = u.maxCoeff() > Scalar(0) ? u.maxCoeff() : Scalar(0);
        const VecS w = (u.array() - top).exp().matrix();
        const Scalar w0 = exp(-top);
        const Scalar denom = w0 + w.sum();
        probs.col(i) = w / denom;
        outside_weight = w0 / denom;
      }
      if (outside) (*outside)(i) = outside_weight;
    }
    return probs;
  }

  /// Simulated shares: row means of `individual`.
  VecS shares(const VecS& delta, Scalar* outside = nullptr) const {
    VecS out_i;
    const MatS probs = individual(delta, outside ? &out_i : nullptr);
    const Scalar inv_r = Scalar(1) / Scalar(consumers());
    if (outside) *outside = out_i.sum() * inv_r;
    return probs.rowwise().sum() * inv_r;
  }

 private:
  static Scalar log_of(Scalar v) {
    using std::log;
    return log(v);
  }
  [[noreturn]] static void throw_dimension_error();

  MatS x1_;
  MatS nu_;
  VecS column_max_;
  MatS exp_mu_;
};

// ---------------------------------------------------------------------------
// Share function and inversion

/// Simulated mixed-logit shares S(delta; sigma). `outside` receives the
/// outside-good share when non-null.
Vec shares(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws,
           double* outside = nullptr);

struct InversionResult {
  Vec delta;
  OptimizerReport report;
};

/// Inversion settings. The contraction runs first; if it has not converged
/// after `newton_after` map evaluations, damped Newton steps on
/// log S(delta) = log s take over with the same tolerance. A negative
/// `newton_after` disables the Newton stage.
struct InversionConfig {
  FixedPointConfig contraction{};
  int newton_after = 100;
  int newton_max_steps = 1000;
  // Full Newton steps taken after convergence (Newton stage enabled only).
  int polish_steps = 2;

  InversionConfig() = default;
  InversionConfig(const FixedPointConfig& c) : contraction(c) {}  // NOLINT
};

/// Mean utilities matching shares `s`: the fixed point of
/// delta <- delta + log s - log S(delta), started at log(s/s0) unless `start`
/// is given. Closed form when sigma is identically zero. Throws DomainError
/// for shares off the open simplex and ConvergenceError when both stages
/// run out of budget.
InversionResult invert_shares(const Vec& s, double s0, const Vec& sigma, const Mat& x1,
                              const ConsumerDraws& draws, const InversionConfig& config = {},
                              const Vec* start = nullptr);

/// Same as `invert_shares` on a prebuilt kernel.
InversionResult invert_shares(const Vec& s, double s0, const ShareKernel<double>& kernel,
                              const InversionConfig& config = {}, const Vec* start = nullptr);

// ---------------------------------------------------------------------------
// Derivatives of the share function

/// dS/d delta' (J x J): entry (j, k) integrates s_ji (1[j = k] - s_ki).
Mat share_jacobian_delta(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws);

/// dS/d sigma (J x L1): column l integrates nu_il s_ji (x_jl - xbar_il), with
/// xbar_il = sum_k s_ki x_kl.
Mat share_dsigma(const Vec& delta, const Vec& sigma, const Mat& x1, const ConsumerDraws& draws);

/// Second derivatives in delta. Slice k is the J x J matrix
/// d/d delta_k (dS/d delta'), i.e. slice[k](j, k') = d2 S_j / d delta_k d delta_k'.
Tensor3 share_hessian_delta(const Vec& delta, const Vec& sigma, const Mat& x1,
                            const ConsumerDraws& draws);

/// Cross derivatives. Slice l is d/d sigma_l (dS/d delta'), a J x J matrix.
Tensor3 share_cross_sigma_delta(const Vec& delta, const Vec& sigma, const Mat& x1,
                                const ConsumerDraws& draws);

/// All share derivatives at one delta, computed from a single pass over the
/// consumer probabilities. The tensors are filled only on request.
struct ShareDerivatives {
  Vec s;
  double s0 = 0.0;
  Mat jacobian;      // dS/d delta'
  Mat dsigma;        // dS/d sigma
  Tensor3 hessian;   // slice k: d/d delta_k dS/d delta'
  Tensor3 cross;     // slice l: d/d sigma_l dS/d delta'
};

ShareDerivatives share_derivatives(const ShareKernel<double>& kernel, const Vec& sigma,
                                   const Vec& delta, bool with_tensors);

/// Directional derivative of dS/d delta' when delta moves along `v_delta` and
/// sigma along `v_sigma` (J x J). Costs one pass over the consumer
/// probabilities instead of the full hessian.
Mat share_jacobian_direction(const ShareKernel<double>& kernel, const Vec& delta, const Vec& v_delta,
                             const Vec& v_sigma);

// ---------------------------------------------------------------------------
// Derivatives of the inverse demand D(s; sigma)

struct InversionDerivatives {
  Vec delta;       // D(s; sigma)
  Mat ds;          // dD/ds' = [dS/d delta']^{-1}
  Mat dsigma;      // dD/d sigma = -[dS/d delta']^{-1} dS/d sigma
  Tensor3 dcross;  // slice l: d/d sigma_l dD/ds'
  double reciprocal_condition = 0.0;
};

/// Implicit-function derivatives of the inverse demand at the observed shares
/// of `market` under `theta.sigma`. Throws ConditioningError when the share
/// jacobian is numerically singular.
InversionDerivatives inversion_derivatives(const Market& market, const Theta& theta,
                                           const ConsumerDraws& draws,
                                           const InversionConfig& config = {});

/// The same derivatives at an already-inverted delta. `with_cross` controls
/// whether the second-order block (which needs the share hessian) is built.
InversionDerivatives inversion_derivatives_at(const ShareKernel<double>& kernel, const Vec& sigma,
                                              const Vec& delta, bool with_cross = true);

/// Smallest admissible reciprocal condition number of the row-equilibrated
/// share jacobian.
inline constexpr double kMinReciprocalCondition = 1e-13;

// ---------------------------------------------------------------------------
// Local-to-logit approximation

/// Coefficients a_jl = (x_jl - xbar_l)^2 - xbar_l^2 with xbar_l = sum_k s_k x_kl.
Mat local_to_logit_coefficients(const Vec& s, const Mat& x1);

/// Draw-free approximation D_j ~ log(s_j/s0) - sum_l a_jl sigma_l^2 / 2.
Vec local_to_logit_inversion(const Vec& s, double s0, const Mat& x1, const Vec& sigma);

/// Second-order approximation of S(delta; sigma) around sigma = 0:
/// S_j(delta;0) [1 + sum_l sigma_l^2/2 ((x_jl - xbar_l)^2 - sum_{k incl. 0} s_k (x_kl - xbar_l)^2)].
Vec local_to_logit_shares(const Vec& delta, const Mat& x1, const Vec& sigma);

/// Plain logit shares exp(delta_j) / (1 + sum_k exp(delta_k)).
Vec logit_shares(const Vec& delta, double* outside = nullptr);

}  // namespace reciv

#include "reciv/error.hpp"

template <typename Scalar>
void reciv::ShareKernel<Scalar>::throw_dimension_error() {
  throw reciv::DomainError("ShareKernel: x1, sigma and draws have inconsistent dimensions");
}
