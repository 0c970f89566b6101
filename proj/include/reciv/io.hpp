#pragma once

// Panel, instrument and result files.
//
// Panel CSV: region,period,product,x1..xL1,price,share,outside_share,g,dropped_flag
// with one row per product; a dropped market is a single row with
// dropped_flag=1 and empty data fields. The intercept column of x is implied.
// Rows of one market must share outside_share.

#include <iosfwd>
#include <string>

#include "json.hpp"
#include "reciv/dgp.hpp"
#include "reciv/estimators.hpp"
#include "reciv/instruments.hpp"
#include "reciv/nestedlogit.hpp"
#include "reciv/panel.hpp"

namespace reciv {

/// Shortest round-trip decimal form of a double ("nan", "inf", "-inf" for
/// non-finite values).
std::string format_double(double v);

void write_panel_csv(std::ostream& out, const Panel& panel);
/// Throws DomainError naming the line on malformed input.
Panel read_panel_csv(std::istream& in);
void write_panel_csv(const std::string& path, const Panel& panel);
Panel read_panel_csv(const std::string& path);

/// Panel CSV with a `nest` column between g and dropped_flag. Reading fills
/// lagged_s from the same region's previous period.
void write_nested_csv(std::ostream& out, const std::vector<NestedMarket>& markets);
std::vector<NestedMarket> read_nested_csv(std::istream& in);

nlohmann::json dgp_config_to_json(const DgpConfig& config);
/// Missing keys keep their defaults.
DgpConfig dgp_config_from_json(const nlohmann::json& j);

/// region,period,product,z0..zK for every market in the set.
void write_instruments_csv(std::ostream& out, const Panel& panel, const InstrumentSet& set);

nlohmann::json estimation_result_to_json(const EstimationResult& result);

}  // namespace reciv
