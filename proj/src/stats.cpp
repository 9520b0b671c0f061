#include "trajaux/stats.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/math/special_functions/beta.hpp>
#include <fmt/format.h>

#include "trajaux/error.hpp"

namespace trajaux {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

TestResult degenerate_result(double diff, TestKind kind, double df) {
  TestResult r;
  r.kind = kind;
  r.df = df;
  r.degenerate = true;
  if (diff == 0.0) {
    r.t = 0.0;
    r.p = 1.0;
  } else {
    r.t = diff > 0.0 ? INFINITY : -INFINITY;
    r.p = 0.0;
  }
  return r;
}

}  // namespace

CellSummary summarize(std::span<const double> values) {
  if (values.empty()) throw DataError("summarize: empty series");
  for (double v : values) {
    if (!std::isfinite(v)) throw DataError("summarize: non-finite observation");
  }
  CellSummary s;
  s.n = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n < 2) {
    s.sd = kNaN;
    return s;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  return s;
}

double incomplete_beta(double a, double b, double x) { return boost::math::ibeta(a, b, x); }

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("student t needs positive degrees of freedom");
  if (std::isnan(t)) return kNaN;
  if (std::isinf(t)) return 0.0;
  // P(|T| >= |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
  return boost::math::ibeta(0.5 * df, 0.5, df / (df + t * t));
}

TestResult welch_unpaired(const CellSummary& x, const CellSummary& y) {
  if (x.n < 2 || y.n < 2) throw DataError("unpaired test needs at least two observations per side");
  const double vx = x.sd * x.sd / static_cast<double>(x.n);
  const double vy = y.sd * y.sd / static_cast<double>(y.n);
  const double se2 = vx + vy;
  if (se2 == 0.0) return degenerate_result(x.mean - y.mean, TestKind::Unpaired, kNaN);
  TestResult r;
  r.kind = TestKind::Unpaired;
  r.t = (x.mean - y.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (vx * vx / static_cast<double>(x.n - 1) + vy * vy / static_cast<double>(y.n - 1));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

TestResult welch_unpaired(std::span<const double> x, std::span<const double> y) {
  return welch_unpaired(summarize(x), summarize(y));
}

TestResult welch_paired(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("paired test needs series aligned by seed");
  if (x.size() < 2) throw DataError("paired test needs at least two pairs");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  const CellSummary s = summarize(d);
  const double df = static_cast<double>(s.n - 1);
  if (s.sd == 0.0) return degenerate_result(s.mean, TestKind::Paired, df);
  TestResult r;
  r.kind = TestKind::Paired;
  r.t = s.mean / (s.sd / std::sqrt(static_cast<double>(s.n)));
  r.df = df;
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

double bonferroni(double alpha, std::size_t k) {
  if (k == 0) throw ConfigError("bonferroni needs at least one test");
  return alpha / static_cast<double>(k);
}

std::vector<bool> holm(std::span<const double> p, double alpha) {
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("holm: p-values must lie in [0, 1]");
  }
  const std::size_t k = p.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<bool> reject(k, false);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(p[order[i]] < alpha / static_cast<double>(k - i))) break;
    reject[order[i]] = true;
  }
  return reject;
}

Gate escalation_gate(std::size_t n) {
  if (n == 0) return Gate::Invalid;
  if (n == 1) return Gate::EscalateOnly;
  return Gate::Testable;
}

std::string gate_name(Gate g) {
  switch (g) {
    case Gate::Invalid: return "invalid";
    case Gate::EscalateOnly: return "escalate-only";
    case Gate::Testable: return "testable";
  }
  return "invalid";
}

// ---------------------------------------------------------------------------
// Records

namespace {

std::string trim(std::string s) {
  const auto ws = [](unsigned char c) { return std::isspace(c); };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, delim)) out.push_back(trim(cell));
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

double parse_pp(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || !std::isfinite(v)) {
    throw DataError(fmt::format("line {}: cannot parse '{}' as a number", line, s));
  }
  return v;
}

void check_distinct_seeds(const std::vector<SeedRecord>& recs) {
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  for (const auto& r : recs) {
    if (!seen.emplace(r.benchmark, r.variant, r.seed).second) {
      throw DataError("duplicate seed " + r.seed + " for " + r.benchmark + "/" + r.variant);
    }
  }
}

}  // namespace

namespace {

struct Table {
  std::map<std::string, std::size_t> idx;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;

  const std::string& cell(std::size_t r, const char* col) const { return rows[r][idx.at(col)]; }
  bool has(const char* col) const { return idx.count(col) != 0; }
};

Table read_table(std::istream& in) {
  std::string header;
  while (std::getline(in, header) && trim(header).empty()) {
  }
  if (trim(header).empty()) throw DataError("records: missing header line");
  char delim = ',';
  if (header.find('\t') != std::string::npos) delim = '\t';
  else if (header.find(';') != std::string::npos && header.find(',') == std::string::npos) delim = ';';
  const auto cols = split(header, delim);
  Table t;
  for (std::size_t i = 0; i < cols.size(); ++i) t.idx[cols[i]] = i;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    auto f = split(line, delim);
    if (f.size() != cols.size()) {
      throw DataError(fmt::format("line {}: expected {} fields, got {}", lineno, cols.size(), f.size()));
    }
    t.rows.push_back(std::move(f));
    t.lines.push_back(lineno);
  }
  return t;
}

void require(const Table& t, std::initializer_list<const char*> cols) {
  for (const char* need : cols) {
    if (!t.has(need)) throw DataError(std::string("records: header lacks column ") + need);
  }
}

std::vector<SeedRecord> seed_records(const Table& t) {
  require(t, {"benchmark", "variant", "seed", "exact_pp", "prefix_pp"});
  std::vector<SeedRecord> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    SeedRecord r;
    r.benchmark = t.cell(i, "benchmark");
    r.variant = t.cell(i, "variant");
    r.seed = t.cell(i, "seed");
    r.exact_pp = parse_pp(t.cell(i, "exact_pp"), t.lines[i]);
    r.prefix_pp = parse_pp(t.cell(i, "prefix_pp"), t.lines[i]);
    out.push_back(std::move(r));
  }
  check_distinct_seeds(out);
  return out;
}

std::vector<SummaryRecord> summary_records(const Table& t) {
  require(t, {"benchmark", "variant", "mean", "sd", "n"});
  std::vector<SummaryRecord> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    SummaryRecord r;
    r.benchmark = t.cell(i, "benchmark");
    r.variant = t.cell(i, "variant");
    r.summary.mean = parse_pp(t.cell(i, "mean"), t.lines[i]);
    const double n = parse_pp(t.cell(i, "n"), t.lines[i]);
    if (n < 1.0 || n != std::floor(n)) throw DataError(fmt::format("line {}: n must be a positive integer", t.lines[i]));
    r.summary.n = static_cast<std::size_t>(n);
    const std::string& sd = t.cell(i, "sd");
    if (r.summary.n < 2) {
      r.summary.sd = kNaN;
    } else {
      r.summary.sd = parse_pp(sd, t.lines[i]);
      if (r.summary.sd < 0.0) throw DataError(fmt::format("line {}: negative sd", t.lines[i]));
    }
    if (!seen.emplace(r.benchmark, r.variant).second) {
      throw DataError("duplicate cell " + r.benchmark + "/" + r.variant);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::vector<SeedRecord> read_records(std::istream& in) { return seed_records(read_table(in)); }

std::vector<SummaryRecord> read_summaries(std::istream& in) { return summary_records(read_table(in)); }

ResultsTable read_results(std::istream& in) {
  const Table t = read_table(in);
  ResultsTable out;
  if (t.has("exact_pp") || t.has("seed")) {
    out.records = seed_records(t);
  } else {
    out.summaries = summary_records(t);
    out.summary_form = true;
  }
  return out;
}

std::vector<SeedRecord> read_records(const nlohmann::json& j) {
  const nlohmann::json* arr = &j;
  if (j.is_object()) {
    if (!j.contains("records")) throw DataError("records JSON: expected an array or an object with 'records'");
    arr = &j.at("records");
  }
  if (!arr->is_array()) throw DataError("records JSON: 'records' must be an array");
  std::vector<SeedRecord> out;
  for (const auto& e : *arr) {
    try {
      SeedRecord r;
      r.benchmark = e.at("benchmark").get<std::string>();
      r.variant = e.at("variant").get<std::string>();
      const auto& s = e.at("seed");
      r.seed = s.is_string() ? s.get<std::string>() : s.dump();
      r.exact_pp = e.at("exact_pp").get<double>();
      r.prefix_pp = e.at("prefix_pp").get<double>();
      if (!std::isfinite(r.exact_pp) || !std::isfinite(r.prefix_pp)) throw DataError("non-finite metric");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(std::string("records JSON: ") + ex.what());
    }
  }
  check_distinct_seeds(out);
  return out;
}

// ---------------------------------------------------------------------------
// Report

std::vector<ReportRow> build_report(const std::vector<SeedRecord>& records, const std::string& baseline,
                                    const std::string& metric) {
  if (metric != "exact" && metric != "prefix") throw ConfigError("metric must be 'exact' or 'prefix'");
  // benchmark -> variant -> seed -> value, keeping first-seen variant order
  std::vector<std::string> benchmarks;
  std::map<std::string, std::vector<std::string>> variants;
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> cells;
  for (const auto& r : records) {
    if (!cells.count(r.benchmark)) benchmarks.push_back(r.benchmark);
    auto& vmap = cells[r.benchmark];
    if (!vmap.count(r.variant)) variants[r.benchmark].push_back(r.variant);
    vmap[r.variant][r.seed] = metric == "exact" ? r.exact_pp : r.prefix_pp;
  }
  std::vector<ReportRow> rows;
  for (const auto& bench : benchmarks) {
    const auto& vmap = cells[bench];
    auto base_it = vmap.find(baseline);
    if (base_it == vmap.end()) throw DataError("baseline '" + baseline + "' missing on benchmark " + bench);
    std::vector<double> base_vals;
    for (const auto& [seed, v] : base_it->second) base_vals.push_back(v);
    const CellSummary base = summarize(base_vals);
    std::vector<std::string> order = variants[bench];
    std::stable_partition(order.begin(), order.end(), [&](const std::string& v) { return v == baseline; });
    for (const auto& var : order) {
      ReportRow row;
      row.benchmark = bench;
      row.variant = var;
      row.metric = metric;
      row.baseline = var == baseline;
      std::vector<double> vals;
      for (const auto& [seed, v] : vmap.at(var)) vals.push_back(v);
      row.summary = summarize(vals);
      row.delta = row.summary.mean - base.mean;
      row.gate = escalation_gate(row.summary.n);
      if (!row.baseline && row.gate == Gate::Testable && base.n >= 2) {
        row.unpaired = welch_unpaired(row.summary, base);
        std::vector<double> px, py;
        for (const auto& [seed, v] : vmap.at(var)) {
          auto it = base_it->second.find(seed);
          if (it == base_it->second.end()) continue;
          px.push_back(v);
          py.push_back(it->second);
        }
        if (px.size() >= 2) row.paired = welch_paired(px, py);
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<ReportRow> build_summary_report(const std::vector<SummaryRecord>& cells, const std::string& baseline,
                                            const std::string& metric) {
  std::vector<std::string> benchmarks;
  std::map<std::string, std::vector<const SummaryRecord*>> by_bench;
  for (const auto& c : cells) {
    if (!by_bench.count(c.benchmark)) benchmarks.push_back(c.benchmark);
    by_bench[c.benchmark].push_back(&c);
  }
  std::vector<ReportRow> rows;
  for (const auto& bench : benchmarks) {
    auto group = by_bench[bench];
    auto base_it = std::find_if(group.begin(), group.end(), [&](const SummaryRecord* c) { return c->variant == baseline; });
    if (base_it == group.end()) throw DataError("baseline '" + baseline + "' missing on benchmark " + bench);
    const CellSummary base = (*base_it)->summary;
    std::stable_partition(group.begin(), group.end(), [&](const SummaryRecord* c) { return c->variant == baseline; });
    for (const SummaryRecord* c : group) {
      ReportRow row;
      row.benchmark = bench;
      row.variant = c->variant;
      row.metric = metric;
      row.baseline = c->variant == baseline;
      row.summary = c->summary;
      row.delta = c->summary.mean - base.mean;
      row.gate = escalation_gate(c->summary.n);
      if (!row.baseline && row.gate == Gate::Testable && base.n >= 2) row.unpaired = welch_unpaired(c->summary, base);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

FamilyVerdict family_verdict(const std::vector<ReportRow>& rows, const std::vector<std::string>& family,
                             double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  const auto in_family = [&](const ReportRow& r) {
    return family.empty() || std::find(family.begin(), family.end(), r.variant) != family.end();
  };
  FamilyVerdict v;
  v.alpha = alpha;
  for (const auto& r : rows) {
    if (r.baseline || !in_family(r)) continue;
    const std::string cell = r.benchmark + "/" + r.variant;
    const auto& test = r.paired ? r.paired : r.unpaired;
    if (r.gate != Gate::Testable || !test) {
      v.excluded.push_back(cell);
      continue;
    }
    v.members.push_back(cell);
    v.p.push_back(test->p);
  }
  for (const auto& name : family) {
    const bool found = std::any_of(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.variant == name; });
    if (!found) throw DataError("family member '" + name + "' not in results");
  }
  if (v.members.empty()) return v;
  v.bonferroni_alpha = bonferroni(alpha, v.members.size());
  v.holm_reject = holm(v.p, alpha);
  for (double p : v.p) v.bonferroni_reject.push_back(p < v.bonferroni_alpha);
  return v;
}

bool FamilyVerdict::any_survives() const {
  return std::find(holm_reject.begin(), holm_reject.end(), true) != holm_reject.end();
}

std::string render_verdict(const FamilyVerdict& v) {
  std::string out = fmt::format("family alpha {:.3g}, {} testable cell(s)", v.alpha, v.members.size());
  if (!v.members.empty()) out += fmt::format(", bonferroni threshold {:.4g}", v.bonferroni_alpha);
  out += "\n";
  for (std::size_t i = 0; i < v.members.size(); ++i) {
    out += fmt::format("  {:<24} p {:.4f}  holm {}  bonferroni {}\n", v.members[i], v.p[i],
                       v.holm_reject[i] ? "reject" : "keep", v.bonferroni_reject[i] ? "reject" : "keep");
  }
  for (const auto& e : v.excluded) out += fmt::format("  {:<24} excluded (escalate-only)\n", e);
  out += v.any_survives() ? "verdict: at least one cell survives\n" : "verdict: no cell survives\n";
  return out;
}

nlohmann::json verdict_json(const FamilyVerdict& v) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < v.members.size(); ++i) {
    cells.push_back({{"cell", v.members[i]},
                     {"p", v.p[i]},
                     {"holm_reject", static_cast<bool>(v.holm_reject[i])},
                     {"bonferroni_reject", static_cast<bool>(v.bonferroni_reject[i])}});
  }
  return {{"alpha", v.alpha},
          {"bonferroni_alpha", v.members.empty() ? nlohmann::json(nullptr) : nlohmann::json(v.bonferroni_alpha)},
          {"cells", cells},
          {"excluded", v.excluded},
          {"any_survives", v.any_survives()}};
}

namespace {

std::string fmt_p(const std::optional<TestResult>& r) {
  if (!r) return "--";
  if (r->degenerate) return r->p == 1.0 ? "1 (deg)" : "0 (deg)";
  if (r->p < 0.001) return "<0.001";
  return fmt::format("{:.3f}", r->p);
}

nlohmann::json test_json(const std::optional<TestResult>& r) {
  if (!r) return nullptr;
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  return {{"t", num(r->t)}, {"df", num(r->df)}, {"p", r->p}, {"degenerate", r->degenerate},
          {"kind", r->kind == TestKind::Paired ? "paired" : "unpaired"}};
}

}  // namespace

std::string render_report(const std::vector<ReportRow>& rows) {
  std::size_t wb = 9, wv = 7;
  for (const auto& r : rows) {
    wb = std::max(wb, r.benchmark.size());
    wv = std::max(wv, r.variant.size());
  }
  std::string out = fmt::format("{:<{}}  {:<{}}  {:>3}  {:>15}  {:>7}  {:>8}  {:>8}  {}\n", "benchmark", wb,
                                "variant", wv, "n", "mean +- sd", "delta", "p_unp", "p_paired", "gate");
  for (const auto& r : rows) {
    const std::string ms = r.summary.sd_defined() ? fmt::format("{:.2f} +- {:.2f}", r.summary.mean, r.summary.sd)
                                                  : fmt::format("{:.2f} +- --", r.summary.mean);
    const std::string delta = r.baseline ? "--" : fmt::format("{:+.2f}", r.delta);
    out += fmt::format("{:<{}}  {:<{}}  {:>3}  {:>15}  {:>7}  {:>8}  {:>8}  {}\n", r.benchmark, wb, r.variant, wv,
                       r.summary.n, ms, delta, fmt_p(r.unpaired), fmt_p(r.paired),
                       r.baseline ? "baseline" : gate_name(r.gate));
  }
  return out;
}

nlohmann::json report_json(const std::vector<ReportRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"benchmark", r.benchmark},
                   {"variant", r.variant},
                   {"metric", r.metric},
                   {"n", r.summary.n},
                   {"mean", r.summary.mean},
                   {"sd", r.summary.sd_defined() ? nlohmann::json(r.summary.sd) : nlohmann::json(nullptr)},
                   {"delta", r.delta},
                   {"baseline", r.baseline},
                   {"gate", gate_name(r.gate)},
                   {"unpaired", test_json(r.unpaired)},
                   {"paired", test_json(r.paired)}});
  }
  return arr;
}

}  // namespace trajaux
