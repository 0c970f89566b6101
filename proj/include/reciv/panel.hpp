#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reciv/types.hpp"

namespace reciv {

struct DroppedMarket {
  int region = 0;
  int period = 0;
  std::string reason;
};

/// A set of markets indexed by (region, period).
struct Panel {
  std::vector<Market> markets;
  std::vector<DroppedMarket> dropped;

  /// Index of the market for (region, period), if present.
  std::optional<std::size_t> find(int region, int period) const;
  /// Pointer to the same region's market in `period - 1`, or null.
  const Market* lagged(const Market& market) const;
  /// Indices of all markets in `period`.
  std::vector<std::size_t> in_period(int period) const;
  Eigen::Index n_characteristics() const;
  Eigen::Index n_random_coefficients() const;
};

/// Index pair (earlier, later) for one region present in both periods.
struct RegionPair {
  int region = 0;
  std::size_t pre = 0;
  std::size_t post = 0;
};

/// Regions observed in both `pre_period` and `post_period`, in market order.
std::vector<RegionPair> region_pairs(const Panel& panel, int pre_period = 1, int post_period = 2);

}  // namespace reciv
