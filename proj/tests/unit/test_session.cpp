#include <doctest.h>

#include <cstring>
#include <fstream>
#include <string>

#include "helpers.hpp"
#include "trajaux/c_api.h"
#include "trajaux/dist_losses.hpp"
#include "trajaux/error.hpp"
#include "trajaux/session.hpp"
#include "trajaux/traj_losses.hpp"

using namespace trajaux;

namespace {

std::vector<std::int64_t> span_table(const TrajectoryBatch& b) {
  std::vector<std::int64_t> out;
  for (const Span& s : b.spans) {
    out.push_back(static_cast<std::int64_t>(s.lo));
    out.push_back(static_cast<std::int64_t>(s.hi));
  }
  return out;
}

std::vector<std::int32_t> label_table(const TrajectoryBatch& b) { return {b.labels.begin(), b.labels.end()}; }

long resident_kb() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("VmRSS:", 0) == 0) return std::stol(line.substr(6));
  return -1;
}

}  // namespace

TEST_CASE("session open") {
  Session jfr("jfr", 8);
  CHECK(jfr.loss_id() == "jfr");
  CHECK(jfr.loss().parameters().empty());
  Session local("T3-Local", 8);
  CHECK(local.loss_id() == "local_jfr");
  CHECK(dynamic_cast<LocalJfrLoss&>(local.loss()).bank.size() == 0);
  CHECK_THROWS_AS(Session("nope", 8), ConfigError);
  CHECK_THROWS_AS(Session("jfr", 8, {{"bank_k", "2"}}), ConfigError);
  CHECK(parse_hyper("scales=1,2,3;margin=0") == Hyper{{"scales", "1,2,3"}, {"margin", "0"}});
}

TEST_CASE("straight line through stp is zero with zero gradient") {
  SynthConfig sc;
  sc.curvature = 0.0;
  sc.D = 12;
  auto batch = synth_batch(sc);
  Session s("stp", 12);
  DualValue dv = s.eval_with_grad(batch, 0);
  CHECK(std::abs(dv.value) < 1e-12);
  for (double g : dv.grad("hidden").data()) CHECK(std::abs(g) < 1e-10);
}

TEST_CASE("empty bank falls back, insertion fills it") {
  auto batch = th::random_batch(3, 24, 8, 1);
  Session s("local_jfr", 8);
  Session plain("jfr", 8);
  DualValue a = s.eval_with_grad(batch, 2);
  CHECK(a.flagged("fallback"));
  CHECK(a.value == plain.eval_with_grad(batch, 2).value);
  s.bank_insert(batch);
  CHECK(dynamic_cast<LocalJfrLoss&>(s.loss()).bank.size() == 3);
  CHECK_FALSE(s.eval_with_grad(batch, 2).flagged("fallback"));
}

TEST_CASE("session shape errors leave it usable") {
  Session s("jfr", 8);
  auto wrong = th::random_batch(2, 20, 6, 1);
  CHECK_THROWS_AS(s.eval_with_grad(wrong, 0), ShapeError);
  auto ok = th::random_batch(2, 20, 8, 1);
  CHECK(std::isfinite(s.eval_with_grad(ok, 0).value));
  CHECK_THROWS_AS(Session("byol", 8).step(0.1), ConfigError);
}

TEST_CASE("session step and ema tick move byol") {
  auto batch = th::random_batch(3, 24, 8, 3);
  Session s("byol", 8, {}, 4);
  const double v0 = s.eval_with_grad(batch, 1).value;
  for (int i = 0; i < 5; ++i) {
    s.eval_with_grad(batch, 1);
    s.step(0.05);
    s.ema_tick();
  }
  CHECK(s.eval_with_grad(batch, 1).value < v0);
}

TEST_CASE("session diagnose") {
  auto batch = th::random_batch(2, 30, 8, 5);
  Session s("mstb_jfr", 8);
  s.set_head(make_toy_head(16, 8, 1));
  auto rep = s.diagnose(batch, 3);
  CHECK(rep.grad_cosine.has_value());
  CHECK(rep.attribution.has_value());
  auto j = diagnostics_json(rep);
  CHECK(j.contains("anisotropy"));
}

TEST_CASE("c boundary matches the library bit for bit") {
  for (const char* id : {"jfr", "mstb_jfr", "sigreg_state", "fisher_jfr", "dv_jepa", "rig"}) {
    CAPTURE(id);
    auto batch = th::random_batch(3, 24, 8, 7, 16);
    const ToyLMHead head = make_toy_head(16, 8, 2);
    Session lib(id, 8, {}, 9);
    lib.set_head(head);
    DualValue want = lib.eval_with_grad(batch, 11);

    trajaux_session* h = nullptr;
    REQUIRE(trajaux_open(id, 8, nullptr, 9, &h) == TRAJAUX_OK);
    REQUIRE(trajaux_set_head(h, head.W.data().data(), 16, 8, head.temperature) == TRAJAUX_OK);
    const auto spans = span_table(batch);
    const auto labels = label_table(batch);
    double value = 0.0;
    std::vector<double> grad(batch.hidden.size());
    REQUIRE(trajaux_eval_with_grad(h, batch.hidden.data().data(), 3, 24, 8, spans.data(), labels.data(), 11,
                                   &value, grad.data()) == TRAJAUX_OK);
    CHECK(value == want.value);
    CHECK(grad == want.grad("hidden").vec());

    size_t needed = 0;
    CHECK(trajaux_diagnose(h, batch.hidden.data().data(), 3, 24, 8, spans.data(), labels.data(), 1, nullptr, 0,
                           &needed) == TRAJAUX_OK);
    std::vector<char> buf(needed);
    CHECK(trajaux_diagnose(h, batch.hidden.data().data(), 3, 24, 8, spans.data(), labels.data(), 1, buf.data(),
                           buf.size(), &needed) == TRAJAUX_OK);
    const auto rep = nlohmann::json::parse(buf.data());
    CHECK(rep == diagnostics_json(lib.diagnose(batch, 1)));
    trajaux_close(h);
  }
}

TEST_CASE("c boundary errors") {
  trajaux_session* h = nullptr;
  CHECK(trajaux_open("nope", 8, nullptr, 0, &h) == TRAJAUX_E_CONFIG);
  CHECK(h == nullptr);
  CHECK(std::strlen(trajaux_last_error()) > 0);
  CHECK(trajaux_open("jfr", 8, "bogus=1", 0, &h) == TRAJAUX_E_CONFIG);
  REQUIRE(trajaux_open("local_jfr", 4, "bank_k=2", 0, &h) == TRAJAUX_OK);
  std::vector<double> hidden(2 * 10 * 4, 0.5);
  std::vector<std::int64_t> bad{0, 11, 0, 10};
  double v = 0;
  CHECK(trajaux_eval_with_grad(h, hidden.data(), 2, 10, 4, bad.data(), nullptr, 0, &v, nullptr) == TRAJAUX_E_DATA);
  CHECK(trajaux_eval_with_grad(h, hidden.data(), 2, 8, 5, std::vector<std::int64_t>{0, 8, 0, 8}.data(), nullptr, 0, &v, nullptr) == TRAJAUX_E_SHAPE);
  hidden[3] = NAN;
  std::vector<std::int64_t> good{0, 10, 2, 9};
  CHECK(trajaux_eval_with_grad(h, hidden.data(), 2, 10, 4, good.data(), nullptr, 0, &v, nullptr) == TRAJAUX_E_DATA);
  hidden[3] = 0.5;
  CHECK(trajaux_bank_insert(h, hidden.data(), 2, 10, 4, good.data()) == TRAJAUX_OK);
  CHECK(trajaux_eval_with_grad(h, hidden.data(), 2, 10, 4, good.data(), nullptr, 0, &v, nullptr) == TRAJAUX_OK);
  CHECK(trajaux_ema_tick(h) == TRAJAUX_OK);
  CHECK(trajaux_step(h, 0.1) == TRAJAUX_OK);
  CHECK(trajaux_eval_with_grad(nullptr, hidden.data(), 2, 10, 4, good.data(), nullptr, 0, &v, nullptr) != TRAJAUX_OK);
  char small[4];
  size_t needed = 0;
  CHECK(trajaux_diagnose(h, hidden.data(), 2, 10, 4, good.data(), nullptr, 0, small, sizeof small, &needed) ==
        TRAJAUX_OK);
  CHECK(needed > sizeof small);
  trajaux_close(h);
  trajaux_close(nullptr);
  double lam = 0;
  CHECK(trajaux_lambda_at(1.0, 1000, 0.25, 0.4, 0.1, 250, &lam) == TRAJAUX_OK);
  CHECK(lam == 1.0);
  CHECK(trajaux_lambda_at(1.0, 1000, 0.7, 0.4, 0.1, 250, &lam) == TRAJAUX_E_CONFIG);
}

TEST_CASE("open and close ten thousand times") {
  std::vector<double> hidden(2 * 12 * 4, 0.0);
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = std::sin(0.37 * i);
  std::vector<std::int64_t> spans{0, 12, 1, 11};
  auto cycle = [&](int n) {
    for (int i = 0; i < n; ++i) {
      trajaux_session* h = nullptr;
      REQUIRE(trajaux_open(i % 2 ? "local_jfr" : "cpc", 4, nullptr, i, &h) == TRAJAUX_OK);
      double v = 0;
      trajaux_bank_insert(h, hidden.data(), 2, 12, 4, spans.data());
      trajaux_eval_with_grad(h, hidden.data(), 2, 12, 4, spans.data(), nullptr, 0, &v, nullptr);
      trajaux_close(h);
    }
  };
  cycle(500);
  const long before = resident_kb();
  cycle(10000);
  const long after = resident_kb();
  MESSAGE("rss kB " << before << " -> " << after);
  CHECK(after - before < 2048);
}
