#include "reciv/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <vector>

#include "reciv/error.hpp"

namespace reciv {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, int line) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DomainError("panel csv line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

int parse_int(const std::string& s, int line) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DomainError("panel csv line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
  return v;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

void write_panel_csv(std::ostream& out, const Panel& panel) {
  const Eigen::Index L1 = panel.markets.empty() ? 2 : panel.markets.front().x1.cols();
  out << "region,period,product";
  for (Eigen::Index l = 0; l < L1; ++l) out << ",x" << (l + 1);
  out << ",price,share,outside_share,g,dropped_flag\n";
  for (const Market& m : panel.markets) {
    for (Eigen::Index j = 0; j < m.n_products(); ++j) {
      out << m.region << ',' << m.period << ',' << (j + 1);
      for (Eigen::Index l = 0; l < L1; ++l) out << ',' << format_double(m.x1(j, l));
      out << ',' << format_double(m.p(j)) << ',' << format_double(m.s(j)) << ',' << format_double(m.s0) << ','
          << format_double(m.g(j)) << ",0\n";
    }
  }
  for (const DroppedMarket& d : panel.dropped) {
    out << d.region << ',' << d.period << ",0";
    for (Eigen::Index l = 0; l < L1; ++l) out << ',';
    out << ",,,,,1\n";
  }
}

namespace {

// Markets of a panel file plus the nest column when the header has one.
struct ParsedPanel {
  Panel panel;
  std::vector<NestLabels> nests;
  bool has_nest = false;
};

ParsedPanel parse_panel(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DomainError("panel csv: empty input");
  const auto header = split(strip_cr(line));
  if (header.size() < 9 || header[0] != "region" || header[1] != "period" || header[2] != "product") {
    throw DomainError("panel csv: unexpected header");
  }
  ParsedPanel out;
  out.has_nest = header[header.size() - 2] == "nest";
  const std::size_t fixed = 3 + 5 + (out.has_nest ? 1 : 0);
  if (header.size() <= fixed) throw DomainError("panel csv: no characteristic columns");
  const std::size_t L1 = header.size() - fixed;
  for (std::size_t l = 0; l < L1; ++l) {
    if (header[3 + l] != "x" + std::to_string(l + 1)) throw DomainError("panel csv: unexpected header");
  }
  const char* tail[] = {"price", "share", "outside_share", "g"};
  for (std::size_t i = 0; i < 4; ++i) {
    if (header[3 + L1 + i] != tail[i]) throw DomainError("panel csv: unexpected header");
  }
  if (header.back() != "dropped_flag") throw DomainError("panel csv: unexpected header");

  struct Rows {
    int region, period;
    std::vector<std::vector<double>> values;
    std::vector<int> nest;
  };
  std::vector<Rows> groups;
  std::map<std::pair<int, int>, std::size_t> index;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size()) {
      throw DomainError("panel csv line " + std::to_string(n) + ": expected " + std::to_string(header.size()) +
                        " fields");
    }
    const int region = parse_int(f[0], n);
    const int period = parse_int(f[1], n);
    if (f.back() == "1") {
      out.panel.dropped.push_back({region, period, "dropped in source file"});
      continue;
    }
    if (f.back() != "0") throw DomainError("panel csv line " + std::to_string(n) + ": dropped_flag must be 0 or 1");
    std::vector<double> v;
    for (std::size_t i = 3; i < 3 + L1 + 4; ++i) v.push_back(parse_double(f[i], n));
    const auto key = std::make_pair(region, period);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, groups.size()).first;
      groups.push_back({region, period, {}, {}});
    }
    groups[it->second].values.push_back(std::move(v));
    if (out.has_nest) groups[it->second].nest.push_back(parse_int(f[3 + L1 + 4], n));
  }
  for (const Rows& g : groups) {
    const auto J = static_cast<Eigen::Index>(g.values.size());
    const auto L = static_cast<Eigen::Index>(L1);
    Market m;
    m.region = g.region;
    m.period = g.period;
    m.x1.resize(J, L);
    m.p.resize(J);
    m.s.resize(J);
    m.g.resize(J);
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto& v = g.values[static_cast<std::size_t>(j)];
      for (std::size_t l = 0; l < L1; ++l) m.x1(j, static_cast<Eigen::Index>(l)) = v[l];
      m.p(j) = v[L1];
      m.s(j) = v[L1 + 1];
      if (j > 0 && v[L1 + 2] != m.s0) {
        throw DomainError("panel csv: outside share differs within market (" + std::to_string(g.region) + ", " +
                          std::to_string(g.period) + ")");
      }
      m.s0 = v[L1 + 2];
      m.g(j) = v[L1 + 3];
    }
    m.x.resize(J, L + 1);
    m.x.col(0).setOnes();
    m.x.rightCols(L) = m.x1;
    m.g_mean = Vec::Zero(J);
    m.validate();
    out.panel.markets.push_back(std::move(m));
    if (out.has_nest) out.nests.push_back(Eigen::Map<const NestLabels>(g.nest.data(), J));
  }
  return out;
}

}  // namespace

Panel read_panel_csv(std::istream& in) { return parse_panel(in).panel; }

void write_nested_csv(std::ostream& out, const std::vector<NestedMarket>& markets) {
  const Eigen::Index L1 = markets.empty() ? 1 : markets.front().x1.cols();
  out << "region,period,product";
  for (Eigen::Index l = 0; l < L1; ++l) out << ",x" << (l + 1);
  out << ",price,share,outside_share,g,nest,dropped_flag\n";
  for (const NestedMarket& m : markets) {
    for (Eigen::Index j = 0; j < m.n_products(); ++j) {
      out << m.region << ',' << m.period << ',' << (j + 1);
      for (Eigen::Index l = 0; l < L1; ++l) out << ',' << format_double(m.x1(j, l));
      out << ',' << format_double(m.p(j)) << ',' << format_double(m.s(j)) << ',' << format_double(m.s0) << ','
          << format_double(m.g(j)) << ',' << m.nest(j) << ",0\n";
    }
  }
}

std::vector<NestedMarket> read_nested_csv(std::istream& in) {
  ParsedPanel parsed = parse_panel(in);
  if (!parsed.has_nest) throw DomainError("nested csv: missing nest column");
  std::vector<NestedMarket> out;
  for (std::size_t i = 0; i < parsed.panel.markets.size(); ++i) {
    NestedMarket m;
    static_cast<Market&>(m) = parsed.panel.markets[i];
    m.nest = parsed.nests[i];
    if (const Market* pre = parsed.panel.lagged(parsed.panel.markets[i]);
        pre != nullptr && pre->n_products() == m.n_products()) {
      m.lagged_s = pre->s;
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_panel_csv(const std::string& path, const Panel& panel) {
  std::ofstream f(path);
  if (!f) throw DomainError("cannot write " + path);
  write_panel_csv(f, panel);
}

Panel read_panel_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DomainError("cannot read " + path);
  return read_panel_csv(f);
}

namespace {

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec from_std(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace

nlohmann::json dgp_config_to_json(const DgpConfig& c) {
  return {{"n_regions", c.n_regions},     {"n_products", c.n_products},
          {"n_periods", c.n_periods},     {"L1", c.L1},
          {"sigma_true", to_std(c.sigma_true)},
          {"alpha_true", c.alpha_true},   {"beta", to_std(c.beta)},
          {"gamma", to_std(c.gamma)},     {"ar_coef", c.ar_coef},
          {"shock_sd", c.shock_sd},       {"dgp_draws", c.dgp_draws},
          {"seed", c.seed},               {"scenario", to_string(c.scenario)},
          {"common_products", c.common_products},
          {"bliss_penalty", c.bliss_penalty}};
}

DgpConfig dgp_config_from_json(const nlohmann::json& j) {
  DgpConfig c;
  if (j.contains("n_regions")) c.n_regions = j.at("n_regions").get<int>();
  if (j.contains("n_products")) c.n_products = j.at("n_products").get<int>();
  if (j.contains("n_periods")) c.n_periods = j.at("n_periods").get<int>();
  if (j.contains("L1")) c.L1 = j.at("L1").get<int>();
  if (j.contains("sigma_true")) c.sigma_true = from_std(j.at("sigma_true").get<std::vector<double>>());
  if (j.contains("alpha_true")) c.alpha_true = j.at("alpha_true").get<double>();
  if (j.contains("beta")) c.beta = from_std(j.at("beta").get<std::vector<double>>());
  if (j.contains("gamma")) c.gamma = from_std(j.at("gamma").get<std::vector<double>>());
  if (j.contains("ar_coef")) c.ar_coef = j.at("ar_coef").get<double>();
  if (j.contains("shock_sd")) c.shock_sd = j.at("shock_sd").get<double>();
  if (j.contains("dgp_draws")) c.dgp_draws = j.at("dgp_draws").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("scenario")) c.scenario = scenario_from_string(j.at("scenario").get<std::string>());
  if (j.contains("common_products")) c.common_products = j.at("common_products").get<int>();
  if (j.contains("bliss_penalty")) c.bliss_penalty = j.at("bliss_penalty").get<double>();
  c.validate();
  return c;
}

void write_instruments_csv(std::ostream& out, const Panel& panel, const InstrumentSet& set) {
  const Eigen::Index K = set.columns();
  out << "region,period,product";
  for (Eigen::Index k = 0; k < K; ++k) out << ",z" << k;
  out << '\n';
  for (std::size_t i = 0; i < set.markets.size(); ++i) {
    const Market& m = panel.markets[set.markets[i]];
    const Mat& z = set.values[i];
    for (Eigen::Index j = 0; j < z.rows(); ++j) {
      out << m.region << ',' << m.period << ',' << (j + 1);
      for (Eigen::Index k = 0; k < K; ++k) out << ',' << format_double(z(j, k));
      out << '\n';
    }
  }
}

nlohmann::json estimation_result_to_json(const EstimationResult& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  auto vec = [&](const Vec& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
    return a;
  };
  nlohmann::json j;
  j["estimator"] = to_string(r.estimator);
  if (is_recentered(r.estimator)) j["mode"] = to_string(r.mode);
  j["converged"] = r.converged();
  j["alpha"] = num(r.theta_hat.alpha);
  j["sigma"] = vec(r.theta_hat.sigma);
  if (r.beta_hat.size() > 0) j["beta"] = vec(r.beta_hat);
  j["objective"] = num(r.objective);
  j["moments"] = vec(r.moments);
  j["grid_start"] = vec(r.grid_start);
  j["method"] = to_string(r.report.method_used);
  j["iterations"] = r.report.iterations;
  j["final_step_norm"] = num(r.report.final_step_norm);
  j["final_gradient_norm"] = num(r.report.final_gradient_norm);
  if (!r.report.message.empty()) j["message"] = r.report.message;
  if (r.fallback_used) j["fallback_reason"] = r.fallback_reason;
  if (r.mode == RecenteredMode::iterative && is_recentered(r.estimator)) j["outer_iterations"] = r.outer_iterations;
  if (is_recentered(r.estimator)) j["pi_check"] = num(r.pi_check);
  if (r.se) {
    nlohmann::json se;
    se["clustering"] = to_string(r.se->clustering);
    se["clusters"] = r.se->clusters;
    const auto names = r.parameter_names();
    for (std::size_t i = 0; i < names.size() && static_cast<Eigen::Index>(i) < r.se->se.size(); ++i) {
      se[names[i]] = num(r.se->se(static_cast<Eigen::Index>(i)));
    }
    j["se"] = se;
  } else if (!r.se_error.empty()) {
    j["se_error"] = r.se_error;
  }
  j["wall_time"] = r.wall_time;
  return j;
}

}  // namespace reciv
