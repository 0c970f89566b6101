#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace reciv {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument lies outside the domain an operation is defined on.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// An iteration ran out of budget before meeting its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// An iterate became non-finite; carries the last finite iterate.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, Eigen::VectorXd last_finite)
      : Error(what), last_finite_(std::move(last_finite)) {}
  const Eigen::VectorXd& last_finite() const { return last_finite_; }

 private:
  Eigen::VectorXd last_finite_;
};

/// A linear system that must be solved is singular or rank deficient.
class RankError : public Error {
 public:
  using Error::Error;
};

/// A matrix is numerically invertible only with an unacceptable condition number.
class ConditioningError : public Error {
 public:
  ConditioningError(const std::string& what, double reciprocal_condition)
      : Error(what), rcond_(reciprocal_condition) {}
  double reciprocal_condition() const { return rcond_; }

 private:
  double rcond_;
};

}  // namespace reciv
