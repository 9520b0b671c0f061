#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace trajaux {

struct CellSummary {
  double mean = 0.0;
  double sd = 0.0;  // n - 1 denominator; NaN when n < 2
  std::size_t n = 0;
  bool sd_defined() const { return n >= 2; }
};

CellSummary summarize(std::span<const double> values);

enum class TestKind { Unpaired, Paired };

struct TestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
  TestKind kind = TestKind::Unpaired;
  bool degenerate = false;  // zero variance on both sides
};

/// Regularised incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

/// P(|T| >= |t|) for Student t with df degrees of freedom.
double student_t_two_sided(double t, double df);

TestResult welch_unpaired(const CellSummary& x, const CellSummary& y);
TestResult welch_unpaired(std::span<const double> x, std::span<const double> y);
/// Paired t on d = x - y, df = n - 1.
TestResult welch_paired(std::span<const double> x, std::span<const double> y);

/// alpha / k.
double bonferroni(double alpha, std::size_t k);
/// Step-down rejections in input order; strict p < alpha / (k - i).
std::vector<bool> holm(std::span<const double> p, double alpha);

enum class Gate { Invalid, EscalateOnly, Testable };
Gate escalation_gate(std::size_t n);
std::string gate_name(Gate g);

// ---------------------------------------------------------------------------
// Per-seed records and table reports

struct SeedRecord {
  std::string benchmark, variant, seed;
  double exact_pp = 0.0;
  double prefix_pp = 0.0;
};

/// Delimiter-separated text with a header naming at least benchmark,
/// variant, seed, exact_pp, prefix_pp (any order). The delimiter is
/// detected from the header: tab, comma or semicolon.
std::vector<SeedRecord> read_records(std::istream& in);
struct SummaryRecord {
  std::string benchmark, variant;
  CellSummary summary;
};

/// Same delimiter rules; columns benchmark, variant, mean, sd, n. The sd
/// field is ignored when n < 2.
std::vector<SummaryRecord> read_summaries(std::istream& in);

/// Either form, told apart by the header.
struct ResultsTable {
  std::vector<SeedRecord> records;
  std::vector<SummaryRecord> summaries;
  bool summary_form = false;
};
ResultsTable read_results(std::istream& in);

/// Either an array of record objects or {"records": [...]}.
std::vector<SeedRecord> read_records(const nlohmann::json& j);

struct ReportRow {
  std::string benchmark, variant, metric;
  CellSummary summary;
  double delta = 0.0;  // mean minus baseline mean
  std::optional<TestResult> unpaired, paired;
  Gate gate = Gate::Invalid;
  bool baseline = false;
};

/// One row per (benchmark, variant) for metric "exact" or "prefix",
/// each variant tested against `baseline` on the same benchmark.
std::vector<ReportRow> build_report(const std::vector<SeedRecord>& records, const std::string& baseline,
                                    const std::string& metric);

/// Unpaired tests only, from transcribed per-cell summaries.
std::vector<ReportRow> build_summary_report(const std::vector<SummaryRecord>& cells, const std::string& baseline,
                                            const std::string& metric);

/// Holm and Bonferroni over the testable non-baseline cells whose variant is
/// listed in `family` (all when empty). Paired p is used when present.
/// Single-seed cells are reported as excluded.
struct FamilyVerdict {
  double alpha = 0.0;
  double bonferroni_alpha = 0.0;
  std::vector<std::string> members;  // "benchmark/variant"
  std::vector<double> p;
  std::vector<bool> holm_reject, bonferroni_reject;
  std::vector<std::string> excluded;
  bool any_survives() const;
};
FamilyVerdict family_verdict(const std::vector<ReportRow>& rows, const std::vector<std::string>& family,
                             double alpha);
std::string render_verdict(const FamilyVerdict& v);
nlohmann::json verdict_json(const FamilyVerdict& v);

std::string render_report(const std::vector<ReportRow>& rows);
nlohmann::json report_json(const std::vector<ReportRow>& rows);

}  // namespace trajaux
