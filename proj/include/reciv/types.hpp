#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace reciv {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vec = VectorX<double>;
using Mat = MatrixX<double>;

/// Third-order tensor stored as a list of matrix slices. The meaning of the
/// slice index is documented by each function returning one.
using Tensor3 = std::vector<Mat>;

/// Double-precision machine epsilon and the tolerances derived from it.
inline constexpr double kEpsilon = 2.220446049250313e-16;
inline constexpr double kInversionTolerance = 8.733757594581093e-14;  // eps^(5/6)
inline constexpr double kStepTolerance = 1.4901161193847656e-08;      // eps^(1/2)
inline constexpr double kGradientTolerance = 6.055454452393343e-06;   // eps^(1/3)

/// Structural demand parameters: price coefficient and random-coefficient
/// standard deviations on the non-price characteristics.
struct Theta {
  double alpha = -1.0;
  Vec sigma;

  Eigen::Index n_sigma() const { return sigma.size(); }
  /// Throws DomainError unless alpha < 0 and every sigma is nonnegative.
  void validate() const;
};

/// One (region, period) market.
///
/// `x` holds all characteristics with column 0 the intercept; `x1` holds the
/// columns that carry random coefficients. Shares are inside-good shares and
/// `s0` the outside-good share.
struct Market {
  int region = 0;
  int period = 0;
  Mat x;
  Mat x1;
  Vec p;
  Vec s;
  double s0 = 0.0;
  Vec g;
  Vec g_mean;  // assumed E[g | x, q]; zero in simulated data

  Eigen::Index n_products() const { return s.size(); }
  /// Recentered cost shocks g - E[g | x, q].
  Vec recentered_shock() const { return g_mean.size() == g.size() ? Vec(g - g_mean) : g; }
  /// Throws DomainError on inconsistent dimensions or shares off the open simplex.
  void validate(double simplex_tol = 1e-10) const;
};

}  // namespace reciv
