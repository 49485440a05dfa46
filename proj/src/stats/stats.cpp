#include "sat3d/stats.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/special_functions/gamma.hpp>

namespace sat3d::stats {

namespace {

std::string normalise(const std::string& s) {
  std::string out;
  for (char c : s)
    if (c != '-' && c != '_' && c != ' ') out += char(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

PValue from_log(double lp) {
  lp = std::min(lp, 0.0);
  return {std::exp(lp), lp};
}

// log Q(a, x) through the Legendre continued fraction, for tails that
// underflow in linear space (x > a + 1 always holds there).
double log_gamma_q_tail(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < 1e-15) break;
  }
  return -x + a * std::log(x) - std::lgamma(a) + std::log(h);
}

// Two-sided normal tail 2 * (1 - Phi(z)) for z >= 0, in log space.
double log_two_sided_normal(double z) {
  const double t = z / std::sqrt(2.0);
  const double e = std::erfc(t);
  if (e > 1e-300) return std::log(e);
  // Leading terms of the asymptotic expansion of erfc.
  return -t * t - std::log(t * std::sqrt(M_PI)) + std::log1p(-0.5 / (t * t));
}

}  // namespace

Orientation orientation_of(const std::string& metric) {
  const std::string m = normalise(metric);
  for (const char* p : {"dsc", "dice", "iou", "jaccard"})
    if (starts_with(m, p)) return Orientation::HigherBetter;
  for (const char* p : {"rve", "hd", "assd"})
    if (starts_with(m, p)) return Orientation::LowerBetter;
  throw ConfigError("cannot tell whether metric '" + metric + "' is higher- or lower-better");
}

void RankTable::validate() const {
  if (values.rows() != Eigen::Index(blocks.size()) || values.cols() != Eigen::Index(methods.size()) ||
      orientation.size() != blocks.size())
    throw ShapeError("rank table labels do not match the value matrix");
  if (values.size() == 0) throw ShapeError("rank table is empty");
  if (!values.allFinite()) throw GapError("rank table has missing or non-finite cells");
}

std::string PValue::text() const {
  if (!(value >= 1e-300)) return "<1e-300";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", value);
  return buf;
}

Eigen::VectorXd average_ranks(const Eigen::VectorXd& v) {
  const Eigen::Index k = v.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  Eigen::VectorXd r(k);
  for (Eigen::Index i = 0; i < k;) {
    Eigen::Index j = i;
    while (j + 1 < k && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (Eigen::Index t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

Eigen::MatrixXd rank_blocks(const RankTable& table) {
  table.validate();
  Eigen::MatrixXd r(table.n(), table.k());
  for (Eigen::Index b = 0; b < table.n(); ++b) {
    Eigen::VectorXd row = table.values.row(b).transpose();
    if (table.orientation[std::size_t(b)] == Orientation::HigherBetter) row = -row;
    r.row(b) = average_ranks(row).transpose();
  }
  return r;
}

PValue chi2_sf(double x, double dof) {
  if (!(dof > 0)) throw ConfigError("chi-square needs positive degrees of freedom");
  if (!(x > 0)) return {1.0, 0.0};
  const double a = dof / 2, z = x / 2;
  const double q = boost::math::gamma_q(a, z);
  if (q > 1e-300) return {q, std::log(q)};
  return from_log(log_gamma_q_tail(a, z));
}

TestResult friedman(const RankTable& table, bool tie_correction) {
  table.validate();
  const double n = double(table.n()), k = double(table.k());
  if (table.n() < 2) throw ConfigError("Friedman test needs at least two blocks");
  const Eigen::MatrixXd r = rank_blocks(table);
  TestResult res;
  res.average_ranks = r.colwise().mean().transpose();
  if (table.k() < 2) {
    res.degenerate = true;
    res.note = "single method: nothing to compare";
    return res;
  }
  const double centre = (k + 1) / 2;
  double chi2 = 12 * n / (k * (k + 1)) * (res.average_ranks.array() - centre).square().sum();
  if (tie_correction) {
    double ties = 0;
    for (Eigen::Index b = 0; b < table.n(); ++b) {
      std::vector<double> row(r.row(b).begin(), r.row(b).end());
      std::sort(row.begin(), row.end());
      for (std::size_t i = 0; i < row.size();) {
        std::size_t j = i;
        while (j < row.size() && row[j] == row[i]) ++j;
        const double t = double(j - i);
        ties += t * t * t - t;
        i = j;
      }
    }
    const double denom = 1 - ties / (n * (k * k * k - k));
    chi2 = denom > 0 ? chi2 / denom : 0.0;
  }
  res.statistic = chi2;
  if ((r.array() == centre).all()) {
    res.degenerate = true;
    res.note = "every block is fully tied";
  }
  res.p = chi2_sf(chi2, k - 1);
  return res;
}

TestResult wilcoxon_signed_rank(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                                WilcoxonMethod method) {
  if (x.size() != y.size()) throw ShapeError("paired samples differ in length");
  std::vector<double> d;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  TestResult res;
  if (d.empty()) {
    res.degenerate = true;
    res.note = "all differences are zero";
    return res;
  }
  const int n = int(d.size());
  if (n < 5) throw DegenerateInputError("signed-rank test needs at least 5 non-zero differences");
  Eigen::VectorXd mag(n);
  for (int i = 0; i < n; ++i) mag[i] = std::abs(d[std::size_t(i)]);
  const Eigen::VectorXd rk = average_ranks(mag);
  double wplus = 0;
  for (int i = 0; i < n; ++i)
    if (d[std::size_t(i)] > 0) wplus += rk[i];
  const double total = n * (n + 1) / 2.0;
  const double w = std::min(wplus, total - wplus);
  res.statistic = w;

  const bool exact = method == WilcoxonMethod::Exact || (method == WilcoxonMethod::Auto && n <= 25);
  if (exact) {
    if (n > 1000) throw ConfigError("exact signed-rank distribution limited to 1000 pairs");
    // Ranks are multiples of 1/2; the null puts probability 1/2 on each sign,
    // so push probabilities over doubled rank sums.
    std::vector<int> r2(static_cast<std::size_t>(n));
    int max_sum = 0;
    for (int i = 0; i < n; ++i) max_sum += r2[std::size_t(i)] = int(std::lround(2 * rk[i]));
    std::vector<double> prob(std::size_t(max_sum) + 1, 0.0);
    prob[0] = 1;
    int reach = 0;
    for (int v : r2) {
      reach += v;
      for (int s = reach; s >= 0; --s)
        prob[std::size_t(s)] = 0.5 * (prob[std::size_t(s)] + (s >= v ? prob[std::size_t(s - v)] : 0.0));
    }
    const int limit = int(std::lround(2 * w));
    double tail = 0;
    for (int s = 0; s <= limit; ++s) tail += prob[std::size_t(s)];
    const double lp = tail > 0 ? std::log(2 * tail) : std::log(2.0) - n * std::log(2.0);
    res.p = from_log(lp);
    res.note = "exact";
    return res;
  }

  double ties = 0;
  {
    std::vector<double> m(mag.begin(), mag.end());
    std::sort(m.begin(), m.end());
    for (std::size_t i = 0; i < m.size();) {
      std::size_t j = i;
      while (j < m.size() && m[j] == m[i]) ++j;
      const double t = double(j - i);
      ties += t * t * t - t;
      i = j;
    }
  }
  const double mean = total / 2;
  const double var = n * (n + 1.0) * (2 * n + 1.0) / 24 - ties / 48;
  const double z = std::max(0.0, (std::abs(w - mean) - 0.5) / std::sqrt(var));
  res.p = from_log(log_two_sided_normal(z));
  res.note = "normal approximation";
  return res;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

RankTable read_long_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty table");
  const auto header = split_csv_line(line);
  auto col = [&](const char* name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (normalise(header[i]) == name) return int(i);
    return -1;
  };
  const int c_block = col("block"), c_metric = col("metric"), c_tumour = col("tumour"),
            c_method = col("method"), c_value = col("value");
  if (c_method < 0 || c_value < 0 || (c_block < 0 && (c_metric < 0 || c_tumour < 0)))
    throw FormatError("table needs block (or metric and tumour), method and value columns");

  std::vector<std::string> blocks, methods;
  std::vector<Orientation> orient;
  std::map<std::pair<std::size_t, std::size_t>, double> cells;
  auto index_of = [](std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it != v.end()) return std::size_t(it - v.begin());
    v.push_back(s);
    return v.size() - 1;
  };
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    const int need = std::max({c_block, c_metric, c_tumour, c_method, c_value});
    if (int(f.size()) <= need) throw FormatError("short row at line " + std::to_string(lineno));
    std::string block, metric;
    if (c_block >= 0) {
      block = f[std::size_t(c_block)];
      metric = c_metric >= 0 ? f[std::size_t(c_metric)] : block.substr(0, block.find_first_of("/:|"));
    } else {
      metric = f[std::size_t(c_metric)];
      block = metric + "/" + f[std::size_t(c_tumour)];
    }
    const std::size_t before = blocks.size();
    const std::size_t b = index_of(blocks, block);
    if (blocks.size() > before) orient.push_back(orientation_of(metric));
    const std::size_t m = index_of(methods, f[std::size_t(c_method)]);
    double v;
    try {
      v = std::stod(f[std::size_t(c_value)]);
    } catch (const std::exception&) {
      throw FormatError("bad value at line " + std::to_string(lineno));
    }
    if (!cells.emplace(std::make_pair(b, m), v).second)
      throw FormatError("duplicate cell at line " + std::to_string(lineno));
  }
  RankTable t{blocks, methods, orient,
              Eigen::MatrixXd::Constant(Eigen::Index(blocks.size()), Eigen::Index(methods.size()),
                                        std::numeric_limits<double>::quiet_NaN())};
  for (const auto& [key, v] : cells) t.values(Eigen::Index(key.first), Eigen::Index(key.second)) = v;
  for (Eigen::Index b = 0; b < t.n(); ++b)
    for (Eigen::Index m = 0; m < t.k(); ++m)
      if (std::isnan(t.values(b, m)))
        throw GapError("no value for block '" + blocks[std::size_t(b)] + "', method '" +
                       methods[std::size_t(m)] + "'");
  return t;
}

RankTable read_long_csv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  return read_long_csv(f);
}

Table1 build_table1(const RankTable& table) {
  Table1 t{table, rank_blocks(table), friedman(table)};
  return t;
}

Table1 build_table1(const CaseReports& cases, const std::vector<std::string>& methods) {
  static const char* names[] = {"DSC", "IoU", "RVE", "HD95", "ASSD"};
  static double metrics::MetricReport::*fields[] = {
      &metrics::MetricReport::dsc, &metrics::MetricReport::iou, &metrics::MetricReport::rve,
      &metrics::MetricReport::hd95, &metrics::MetricReport::assd};
  if (methods.empty()) throw ConfigError("no methods to compare");
  RankTable t;
  t.methods = methods;
  std::vector<std::vector<double>> rows;
  for (int mi = 0; mi < 5; ++mi)
    for (const auto& [tumour, by_method] : cases) {
      std::vector<double> row;
      for (const auto& method : methods) {
        auto it = by_method.find(method);
        if (it == by_method.end() || it->second.empty())
          throw GapError("no cases for tumour '" + tumour + "', method '" + method + "'");
        double sum = 0;
        int count = 0;
        for (const auto& r : it->second) {
          const double v = r.*fields[mi];
          if (std::isfinite(v)) {
            sum += v;
            ++count;
          }
        }
        if (count == 0)
          throw GapError(std::string("no finite ") + names[mi] + " for tumour '" + tumour +
                         "', method '" + method + "'");
        row.push_back(sum / count);
      }
      t.blocks.push_back(std::string(names[mi]) + "/" + tumour);
      t.orientation.push_back(orientation_of(names[mi]));
      rows.push_back(std::move(row));
    }
  t.values.resize(Eigen::Index(rows.size()), Eigen::Index(methods.size()));
  for (std::size_t b = 0; b < rows.size(); ++b)
    for (std::size_t m = 0; m < methods.size(); ++m) t.values(Eigen::Index(b), Eigen::Index(m)) = rows[b][m];
  return build_table1(t);
}

void to_json(nlohmann::json& j, const TestResult& r) {
  j = {{"statistic", r.statistic},
       {"p_value", r.p.value},
       {"p_text", r.p.text()},
       {"log_p", r.p.log_value},
       {"degenerate", r.degenerate}};
  if (r.average_ranks.size() > 0)
    j["average_ranks"] = std::vector<double>(r.average_ranks.begin(), r.average_ranks.end());
  if (!r.note.empty()) j["note"] = r.note;
}

nlohmann::json table1_json(const Table1& t) {
  nlohmann::json blocks = nlohmann::json::array();
  for (Eigen::Index b = 0; b < t.table.n(); ++b) {
    nlohmann::json cells = nlohmann::json::array();
    for (Eigen::Index m = 0; m < t.table.k(); ++m)
      cells.push_back({{"method", t.table.methods[std::size_t(m)]},
                       {"value", t.table.values(b, m)},
                       {"rank", t.ranks(b, m)}});
    blocks.push_back({{"block", t.table.blocks[std::size_t(b)]}, {"cells", cells}});
  }
  return {{"methods", t.table.methods}, {"blocks", blocks}, {"friedman", t.friedman}};
}

}  // namespace sat3d::stats
