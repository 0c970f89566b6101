#include "reciv/panel.hpp"

#include <cmath>
#include <sstream>

#include "reciv/error.hpp"

namespace reciv {

void Theta::validate() const {
  if (!(alpha < 0.0)) throw DomainError("theta: alpha must be negative");
  if (!(sigma.array() >= 0.0).all()) throw DomainError("theta: sigma must be nonnegative");
}

void Market::validate(double simplex_tol) const {
  const Eigen::Index J = s.size();
  std::ostringstream where;
  where << "market (" << region << ", " << period << "): ";
  if (J == 0) throw DomainError(where.str() + "no products");
  if (x.rows() != J || x1.rows() != J || p.size() != J || g.size() != J) {
    throw DomainError(where.str() + "inconsistent product counts");
  }
  if (g_mean.size() != 0 && g_mean.size() != J) throw DomainError(where.str() + "bad shock-mean length");
  if (x1.cols() > x.cols()) throw DomainError(where.str() + "more random coefficients than characteristics");
  if (!(s.array() > 0.0).all() || !(s0 > 0.0)) throw DomainError(where.str() + "shares must be positive");
  if (std::abs(s0 + s.sum() - 1.0) > simplex_tol) throw DomainError(where.str() + "shares do not sum to one");
}

std::optional<std::size_t> Panel::find(int region, int period) const {
  for (std::size_t i = 0; i < markets.size(); ++i) {
    if (markets[i].region == region && markets[i].period == period) return i;
  }
  return std::nullopt;
}

const Market* Panel::lagged(const Market& market) const {
  const auto idx = find(market.region, market.period - 1);
  return idx ? &markets[*idx] : nullptr;
}

std::vector<std::size_t> Panel::in_period(int period) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < markets.size(); ++i) {
    if (markets[i].period == period) out.push_back(i);
  }
  return out;
}

Eigen::Index Panel::n_characteristics() const { return markets.empty() ? 0 : markets.front().x.cols(); }

Eigen::Index Panel::n_random_coefficients() const {
  return markets.empty() ? 0 : markets.front().x1.cols();
}

std::vector<RegionPair> region_pairs(const Panel& panel, int pre_period, int post_period) {
  std::vector<RegionPair> pairs;
  for (std::size_t i = 0; i < panel.markets.size(); ++i) {
    const Market& m = panel.markets[i];
    if (m.period != post_period) continue;
    const auto pre = panel.find(m.region, pre_period);
    if (!pre) continue;
    if (panel.markets[*pre].n_products() != m.n_products()) continue;
    pairs.push_back({m.region, *pre, i});
  }
  return pairs;
}

}  // namespace reciv
