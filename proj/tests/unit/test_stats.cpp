#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/quadrature/exp_sinh.hpp>

#include "oracles.hpp"
#include "trajaux/error.hpp"
#include "trajaux/rng.hpp"
#include "trajaux/stats.hpp"

using namespace trajaux;

namespace {

// Two-sided tail by direct quadrature of the t density.
double t_tail_oracle(double t, double df) {
  const double c = std::lgamma((df + 1) / 2) - std::lgamma(df / 2) - 0.5 * std::log(df * M_PI);
  auto f = [&](double x) { return std::exp(c - (df + 1) / 2 * std::log1p(x * x / df)); };
  boost::math::quadrature::exp_sinh<double> q;
  return 2.0 * q.integrate(f, std::abs(t), INFINITY);
}

std::ifstream fixture(const char* name) {
  std::ifstream in(std::string(TRAJAUX_FIXTURES) + "/" + name);
  REQUIRE(in.good());
  return in;
}

}  // namespace

TEST_CASE("summarize") {
  std::vector<double> a{50, 52, 51};
  CellSummary s = summarize(a);
  CHECK(s.mean == 51.0);
  CHECK(s.sd == 1.0);
  CHECK(s.n == 3);
  std::vector<double> one{50};
  s = summarize(one);
  CHECK(s.mean == 50.0);
  CHECK_FALSE(s.sd_defined());
  CHECK(std::isnan(s.sd));
  std::vector<double> flat{7.25, 7.25, 7.25, 7.25};
  CHECK(summarize(flat).sd == 0.0);
  CHECK_THROWS_AS(summarize(std::vector<double>{}), DataError);
  CHECK_THROWS_AS(summarize(std::vector<double>{1.0, NAN}), DataError);
}

TEST_CASE("welch unpaired: table rows") {
  TestResult r = welch_unpaired(CellSummary{53.20, 1.91, 3}, CellSummary{50.67, 1.68, 3});
  CHECK(r.p > 0.15);
  CHECK(r.p < 0.17);
  r = welch_unpaired(CellSummary{89.80, 0.53, 3}, CellSummary{88.93, 0.42, 3});
  CHECK(r.p > 0.08);
  CHECK(r.p < 0.10);
  CHECK(r.kind == TestKind::Unpaired);
}

TEST_CASE("welch df") {
  TestResult r = welch_unpaired(CellSummary{1.0, 2.0, 3}, CellSummary{0.0, 2.0, 3});
  CHECK(r.df == doctest::Approx(4.0).epsilon(1e-14));
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    CellSummary x{rng.normal(), 0.1 + rng.uniform(), 2 + rng.index(8)};
    CellSummary y{rng.normal(), 0.1 + rng.uniform(), 2 + rng.index(8)};
    const double vx = x.sd * x.sd / x.n, vy = y.sd * y.sd / y.n;
    const double df = (vx + vy) * (vx + vy) / (vx * vx / (x.n - 1) + vy * vy / (y.n - 1));
    r = welch_unpaired(x, y);
    CHECK(r.df == doctest::Approx(df).epsilon(1e-12));
    CHECK(r.t == doctest::Approx((x.mean - y.mean) / std::sqrt(vx + vy)).epsilon(1e-12));
    CHECK(r.df >= std::min(x.n, y.n) - 1 - 1e-12);
    CHECK(r.df <= x.n + y.n - 2 + 1e-12);
  }
}

TEST_CASE("welch unpaired degenerate") {
  TestResult r = welch_unpaired(CellSummary{5, 0, 3}, CellSummary{5, 0, 3});
  CHECK(r.degenerate);
  CHECK(r.p == 1.0);
  r = welch_unpaired(CellSummary{5, 0, 3}, CellSummary{6, 0, 3});
  CHECK(r.degenerate);
  CHECK(r.p == 0.0);
  CHECK_THROWS_AS(welch_unpaired(CellSummary{5, NAN, 1}, CellSummary{6, 1, 3}), DataError);
}

TEST_CASE("welch paired") {
  std::vector<double> x{12, 13, 11}, y{10, 10, 10};
  TestResult r = welch_paired(x, y);
  CHECK(r.t == doctest::Approx(2 * std::sqrt(3.0)).epsilon(1e-14));
  CHECK(r.df == 2.0);
  // df = 2 has a closed-form tail.
  CHECK(r.p == doctest::Approx(1 - r.t / std::sqrt(r.t * r.t + 2)).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.0742).epsilon(1e-3));
  CHECK(r.kind == TestKind::Paired);
  r = welch_paired(x, x);
  CHECK(r.t == 0.0);
  CHECK(r.p == 1.0);
  CHECK(r.degenerate);
  std::vector<double> shifted{13, 14, 12};
  r = welch_paired(shifted, x);
  CHECK(r.degenerate);
  CHECK(r.p == 0.0);
  std::vector<double> shorter{1, 2};
  CHECK_THROWS_AS(welch_paired(x, shorter), DataError);
}

TEST_CASE("student t tail against quadrature") {
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    const double df = 1 + 30 * rng.uniform();
    const double t = 6 * rng.normal();
    const double got = student_t_two_sided(t, df);
    CHECK(std::abs(got - t_tail_oracle(t, df)) < 1e-9);
  }
  CHECK(student_t_two_sided(0.0, 3.0) == doctest::Approx(1.0).epsilon(1e-15));
  // df = 1 is Cauchy.
  CHECK(student_t_two_sided(1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(student_t_two_sided(1.0, 0.0), ConfigError);
}

TEST_CASE("series form equals summary form") {
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(2 + rng.index(6)), y(2 + rng.index(6));
    for (double& v : x) v = 50 + 2 * rng.normal();
    for (double& v : y) v = 51 + 2 * rng.normal();
    TestResult a = welch_unpaired(x, y), b = welch_unpaired(summarize(x), summarize(y));
    CHECK(a.t == doctest::Approx(b.t).epsilon(1e-12));
    CHECK(a.df == doctest::Approx(b.df).epsilon(1e-12));
    CHECK(a.p == doctest::Approx(b.p).epsilon(1e-12));
  }
}

TEST_CASE("swapping sides negates t and keeps p") {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(3), y(3);
    for (double& v : x) v = rng.normal();
    for (double& v : y) v = rng.normal();
    TestResult a = welch_unpaired(x, y), b = welch_unpaired(y, x);
    CHECK(a.t == doctest::Approx(-b.t).epsilon(1e-12));
    CHECK(a.p == doctest::Approx(b.p).epsilon(1e-12));
    a = welch_paired(x, y);
    b = welch_paired(y, x);
    CHECK(a.t == doctest::Approx(-b.t).epsilon(1e-12));
    CHECK(a.p == doctest::Approx(b.p).epsilon(1e-12));
  }
}

TEST_CASE("bonferroni") {
  CHECK(bonferroni(0.10, 4) == 0.025);
  CHECK(bonferroni(0.10, 10) == 0.01);
  CHECK(bonferroni(0.05, 1) == 0.05);
  CHECK_THROWS_AS(bonferroni(0.1, 0), ConfigError);
}

TEST_CASE("holm examples") {
  std::vector<double> p{0.057, 0.09, 0.10, 0.50};
  CHECK(holm(p, 0.10) == std::vector<bool>(4, false));
  std::vector<double> q{0.5, 0.001};
  CHECK(holm(q, 0.10) == std::vector<bool>{false, true});
  std::vector<double> ones(5, 1.0);
  CHECK(holm(ones, 0.10) == std::vector<bool>(5, false));
  std::vector<double> bad{0.1, 1.5};
  CHECK_THROWS_AS(holm(bad, 0.1), DataError);
  CHECK(holm(std::vector<double>{}, 0.1).empty());
}

TEST_CASE("holm matches brute force and dominates bonferroni") {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> p(1 + rng.index(12));
    for (double& v : p) {
      // Mix of tiny, tied and ordinary p-values.
      const double u = rng.uniform();
      v = u < 0.3 ? 0.02 * rng.uniform() : (u < 0.4 ? 0.01 : rng.uniform());
    }
    const double alpha = 0.01 + 0.2 * rng.uniform();
    const auto got = holm(p, alpha);
    CHECK(got == oracle::holm(p, alpha));
    const double b = alpha / p.size();
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] < b) CHECK(got[i]);
  }
}

TEST_CASE("escalation gate") {
  CHECK(escalation_gate(0) == Gate::Invalid);
  CHECK(escalation_gate(1) == Gate::EscalateOnly);
  CHECK(escalation_gate(2) == Gate::Testable);
  CHECK(escalation_gate(3) == Gate::Testable);
  CHECK(gate_name(Gate::EscalateOnly) != gate_name(Gate::Testable));
}

TEST_CASE("record parsing") {
  SUBCASE("csv with shuffled columns") {
    std::istringstream in("seed,variant,benchmark,prefix_pp,exact_pp\n0,a,b,2.5,1.5\n1,a,b,3,2\n");
    auto r = read_records(in);
    REQUIRE(r.size() == 2);
    CHECK(r[0].variant == "a");
    CHECK(r[0].benchmark == "b");
    CHECK(r[0].exact_pp == 1.5);
    CHECK(r[1].prefix_pp == 3.0);
  }
  SUBCASE("semicolon") {
    std::istringstream in("benchmark;variant;seed;exact_pp;prefix_pp\nb;a;0;1;2\n");
    CHECK(read_records(in).size() == 1);
  }
  SUBCASE("errors") {
    std::istringstream missing("benchmark,variant,seed,exact_pp\nb,a,0,1\n");
    CHECK_THROWS_AS(read_records(missing), DataError);
    std::istringstream bad("benchmark,variant,seed,exact_pp,prefix_pp\nb,a,0,x,1\n");
    CHECK_THROWS_AS(read_records(bad), DataError);
    std::istringstream dup("benchmark,variant,seed,exact_pp,prefix_pp\nb,a,0,1,1\nb,a,0,2,2\n");
    CHECK_THROWS_AS(read_records(dup), DataError);
    std::istringstream ragged("benchmark,variant,seed,exact_pp,prefix_pp\nb,a,0,1\n");
    CHECK_THROWS_AS(read_records(ragged), DataError);
  }
  SUBCASE("json") {
    auto j = nlohmann::json::parse(
        R"({"records":[{"benchmark":"b","variant":"a","seed":"0","exact_pp":1,"prefix_pp":2}]})");
    auto r = read_records(j);
    REQUIRE(r.size() == 1);
    CHECK(r[0].prefix_pp == 2.0);
    CHECK_THROWS_AS(read_records(nlohmann::json::parse(R"({"rows":[]})")), DataError);
  }
  SUBCASE("summary form detected") {
    auto in = fixture("table_summaries.csv");
    ResultsTable t = read_results(in);
    CHECK(t.summary_form);
    CHECK(t.summaries.size() == 31);
    auto in2 = fixture("family_seeds.tsv");
    ResultsTable u = read_results(in2);
    CHECK_FALSE(u.summary_form);
    CHECK(u.records.size() == 16);
  }
}

TEST_CASE("summary report reproduces table p-values") {
  auto in = fixture("table_summaries.csv");
  auto rows = build_summary_report(read_summaries(in), "regular", "exact");
  auto find = [&](const std::string& b, const std::string& v) -> const ReportRow& {
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const ReportRow& r) { return r.benchmark == b && r.variant == v; });
    REQUIRE(it != rows.end());
    return *it;
  };
  // Published two-decimal p_unp; inputs are rounded so allow a little slack.
  struct Row {
    const char *b, *v;
    double p;
  };
  for (Row r : {Row{"turk", "local_jfr", 0.16}, Row{"turk", "jfr", 0.19}, Row{"turk", "stp", 0.69},
                Row{"synth", "sigreg_state", 0.09}, Row{"synth", "ctube_sectional", 0.14},
                Row{"synth", "score_match", 0.02}, Row{"synth", "sw_iso", 0.18}}) {
    const ReportRow& row = find(r.b, r.v);
    REQUIRE(row.unpaired);
    CHECK(std::abs(row.unpaired->p - r.p) < 0.011);
    CHECK_FALSE(row.paired);
  }
  CHECK(find("synth", "ctube").unpaired->p < 0.001);
  CHECK(find("synth", "byol").unpaired->p == doctest::Approx(1.0));
  CHECK(find("turk", "regular").baseline);
  CHECK(find("synth", "sigreg_state").delta == doctest::Approx(0.87).epsilon(1e-9));
}

TEST_CASE("family verdicts") {
  SUBCASE("tier-1 paired p-values") {
    // Four cells with paired p-values from the synth table.
    std::vector<ReportRow> rows;
    const char* names[] = {"sigreg_state", "sigreg_tangent", "ctube_sectional", "stp_cmf"};
    const double ps[] = {0.10, 0.50, 0.09, 0.057};
    for (int i = 0; i < 4; ++i) {
      ReportRow r;
      r.benchmark = "synth";
      r.variant = names[i];
      r.gate = Gate::Testable;
      r.paired = TestResult{0, 2, ps[i], TestKind::Paired};
      rows.push_back(r);
    }
    FamilyVerdict v = family_verdict(rows, {}, 0.10);
    CHECK(v.bonferroni_alpha == 0.025);
    CHECK_FALSE(v.any_survives());
    CHECK(render_verdict(v).find("no cell survives") != std::string::npos);
    CHECK(verdict_json(v)["any_survives"] == false);
  }
  SUBCASE("per-seed records") {
    auto in = fixture("family_seeds.tsv");
    auto rows = build_report(read_records(in), "regular", "exact");
    FamilyVerdict v = family_verdict(rows, {}, 0.10);
    CHECK(v.members.size() == 4);
    REQUIRE(v.excluded.size() == 1);
    CHECK(v.excluded[0] == "synth/ctube");
    for (const auto& r : rows)
      if (r.variant == "ctube") {
        CHECK(r.gate == Gate::EscalateOnly);
        CHECK_FALSE(r.unpaired);
        CHECK_FALSE(r.paired);
      } else if (!r.baseline) {
        REQUIRE(r.paired);
        CHECK(r.paired->df == 2.0);
      }
    CHECK(v.holm_reject.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
      if (v.bonferroni_reject[i]) CHECK(v.holm_reject[i]);
    FamilyVerdict sub = family_verdict(rows, {"sigreg_state", "stp_cmf"}, 0.10);
    CHECK(sub.members.size() == 2);
    CHECK(sub.bonferroni_alpha == 0.05);
    CHECK_THROWS_AS(family_verdict(rows, {"vicreg_vc"}, 0.10), DataError);
    CHECK_THROWS_AS(family_verdict(rows, {}, 1.5), ConfigError);
    CHECK(report_json(rows).size() == rows.size());
    CHECK(render_report(rows).find("escalate") != std::string::npos);
  }
  SUBCASE("missing baseline") {
    auto in = fixture("family_seeds.tsv");
    CHECK_THROWS_AS(build_report(read_records(in), "nobody", "exact"), DataError);
    auto in2 = fixture("family_seeds.tsv");
    CHECK_THROWS_AS(build_report(read_records(in2), "regular", "bleu"), ConfigError);
  }
}
