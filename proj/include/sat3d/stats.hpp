#pragma once

#include <Eigen/Core>

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sat3d/metrics.hpp"

namespace sat3d::stats {

enum class Orientation { HigherBetter, LowerBetter };

// DSC and IoU are higher-better; RVE, HD95 and ASSD lower-better. Matching is
// case-insensitive and ignores '-' and '_' (so "HD-95" and "hd95_mm" work).
Orientation orientation_of(const std::string& metric);

// n blocks x k methods, no missing cells.
struct RankTable {
  std::vector<std::string> blocks;
  std::vector<std::string> methods;
  std::vector<Orientation> orientation;  // one per block
  Eigen::MatrixXd values;

  Eigen::Index n() const { return values.rows(); }
  Eigen::Index k() const { return values.cols(); }
  void validate() const;
};

// A p-value with its natural log, so tails far below double range stay usable.
struct PValue {
  double value = 1;
  double log_value = 0;
  std::string text() const;  // "<1e-300" when it underflows
};

struct TestResult {
  double statistic = 0;
  PValue p;
  Eigen::VectorXd average_ranks;  // empty for Wilcoxon
  bool degenerate = false;
  std::string note;
};

// 1 = best within each block; ties share the average rank.
Eigen::MatrixXd rank_blocks(const RankTable& table);

// Average ranks of one vector where smaller is better.
Eigen::VectorXd average_ranks(const Eigen::VectorXd& v);

// Upper tail of the chi-square distribution with dof degrees of freedom.
PValue chi2_sf(double x, double dof);

TestResult friedman(const RankTable& table, bool tie_correction = false);

// Auto: exact null up to 25 non-zero pairs, normal approximation (continuity
// and tie corrected) above. Exact works up to 1000 pairs.
enum class WilcoxonMethod { Auto, Exact, Normal };

// Two-sided signed-rank test. Zero differences are dropped. Statistic is
// min(W+, W-).
TestResult wilcoxon_signed_rank(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                WilcoxonMethod method = WilcoxonMethod::Auto);

// Long-format CSV: header naming at least "block" (or "metric" and "tumour"),
// "method" and "value". Orientation comes from the metric name, else the
// block name. Method order follows first appearance.
RankTable read_long_csv(std::istream& is);
RankTable read_long_csv_file(const std::string& path);

// Per-case reports grouped as cases[tumour][method] -> list of reports. Every
// (tumour, metric, method) cell is the mean over cases. Throws GapError when a
// tumour lacks a method or a cell has no finite values.
struct Table1 {
  RankTable table;
  Eigen::MatrixXd ranks;
  TestResult friedman;
};

using CaseReports = std::map<std::string, std::map<std::string, std::vector<metrics::MetricReport>>>;

Table1 build_table1(const CaseReports& cases, const std::vector<std::string>& methods);
Table1 build_table1(const RankTable& table);

void to_json(nlohmann::json& j, const TestResult& r);
nlohmann::json table1_json(const Table1& t);

}  // namespace sat3d::stats
