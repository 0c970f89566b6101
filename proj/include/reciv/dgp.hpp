#pragma once

// Two-period mixed-logit panel with single-product Bertrand pricing and the
// scenario variants used by the Monte Carlo experiments.

#include <cstdint>
#include <random>
#include <string>

#include "reciv/mixedlogit.hpp"
#include "reciv/panel.hpp"
#include "reciv/solvers.hpp"
#include "reciv/types.hpp"

namespace reciv {

enum class Scenario { baseline, shock_sweep, common_products, bliss_point };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

struct DgpConfig {
  int n_regions = 100;
  int n_products = 15;
  int n_periods = 2;
  int L1 = 2;
  Vec sigma_true = Vec::Constant(2, 4.0);
  double alpha_true = -0.2 - 4.0 * 1.6487212707001282;  // -0.2 - 4 e^{0.5}
  Vec beta = (Vec(3) << 35.0, 2.0, 2.0).finished();
  Vec gamma = (Vec(3) << 5.0, 1.0, 1.0).finished();
  double ar_coef = 0.9;
  double shock_sd = 0.2;
  int dgp_draws = 1000;
  std::uint64_t seed = 1;
  Scenario scenario = Scenario::baseline;
  int common_products = 0;     // used by Scenario::common_products
  double bliss_penalty = 3.0;  // used by Scenario::bliss_point

  /// Throws DomainError on an inconsistent configuration.
  void validate() const;
};

/// Independent random-number substreams of one replication.
enum class SeedStream : std::uint32_t {
  characteristics = 1,
  xi = 2,
  omega = 3,
  shocks = 4,
  draws = 5,
  permutations = 6,
  bliss = 7,
};

/// Generator for one substream, seeded from (master, stream) through
/// std::seed_seq.
std::mt19937_64 substream(std::uint64_t master, SeedStream stream);

// ---------------------------------------------------------------------------
// Pricing

enum class Ownership { single_product, joint };

struct PricingConfig {
  Ownership ownership = Ownership::single_product;
  double tolerance = 1e-10;
  int max_iterations = 5000;
  double foc_tolerance = 1e-8;
  int newton_iterations = 100;
};

struct PricingResult {
  Vec p;
  bool ok = false;
  double foc_residual = 0.0;  // sup-norm, price units
  SolverMethod method = SolverMethod::fixed_point_squarem;
  bool used_fallback = false;
  std::string message;
};

/// Residual of the pricing first-order conditions in price units:
/// p - c + [Omega o dS/dp']^{-1} S, with Omega the ownership pattern.
Vec pricing_foc_residual(const Vec& p, const Vec& costs, const Vec& delta_exogenous, double alpha,
                         const ShareKernel<double>& kernel, Ownership ownership);

/// Equilibrium prices given costs and the non-price part of mean utility.
/// Uses the markup fixed point p <- c + Lambda^{-1} (Omega o Gamma)(p - c) - Lambda^{-1} S,
/// verified against the first-order conditions, with a damped Newton
/// fallback. `ok` is false when both fail.
PricingResult solve_prices(const Vec& costs, const Vec& delta_exogenous, const Theta& theta, const Mat& x1,
                           const ConsumerDraws& draws, const PricingConfig& config = {});

// ---------------------------------------------------------------------------
// Panel simulation

struct SimulatedPanel {
  Panel panel;
  DgpConfig truth;
  ConsumerDraws dgp_draws;
  std::vector<Vec> xi;  // per market, aligned with panel.markets
  std::vector<Vec> omega;
  Vec bliss;            // per region (bliss scenario only)
};

/// Center the first characteristic on the region's bliss point and lower the
/// taste shifters by penalty * (x - B)^2. `x_first` holds standard-normal
/// deviations on entry and the shifted characteristic on exit; every column
/// of `xi` is a period.
void apply_bliss_point(double bliss, Vec& x_first, Mat& xi, double penalty = 3.0);

/// Stationary unit-variance AR(1) paths: one row per (region, product), one
/// column per period.
Mat ar1_paths(std::mt19937_64& rng, int regions, int J, int periods, double rho);

SimulatedPanel simulate_panel(const DgpConfig& config, const PricingConfig& pricing = {});

}  // namespace reciv
