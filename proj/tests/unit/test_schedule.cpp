#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "trajaux/error.hpp"
#include "trajaux/registry.hpp"
#include "trajaux/schedule.hpp"
#include "trajaux/traj_losses.hpp"

using namespace trajaux;

TEST_CASE("lambda endpoints") {
  ScheduleConfig c;
  c.lambda0 = 1.0;
  c.steps = 1000;
  CHECK(lambda_at(c, 0).value == 0.0);
  CHECK(lambda_at(c, 250).value == 1.0);
  CHECK(lambda_at(c, 1000).value == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(lambda_at(c, 125).value == doctest::Approx(0.5));
  CHECK(lambda_at(c, 600).value == 1.0);
  CHECK(lambda_at(c, 875).value == doctest::Approx(0.55));
  LambdaValue late = lambda_at(c, 5000);
  CHECK(late.clamped);
  CHECK(late.value == doctest::Approx(0.1).epsilon(1e-15));
  CHECK_FALSE(lambda_at(c, 1000).clamped);
}

TEST_CASE("lambda is continuous, bounded and piecewise linear") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    ScheduleConfig c;
    c.lambda0 = 0.1 + 3.0 * rng.uniform();
    c.steps = 40 + rng.index(400);
    c.warmup_frac = 0.5 * rng.uniform();
    c.decay_frac = (1.0 - c.warmup_frac) * rng.uniform();
    c.floor_ratio = rng.uniform();
    c.validate();
    const double Tw = c.warmup_frac * c.steps, Td = c.decay_frac * c.steps;
    double prev = lambda_at(c, 0).value;
    double lo_decay = INFINITY;
    std::size_t kinks = 0;
    double prev_slope = NAN;
    for (std::size_t t = 1; t <= c.steps; ++t) {
      const double v = lambda_at(c, t).value;
      CHECK(v >= 0.0);
      CHECK(v <= c.lambda0 * (1 + 1e-15));
      // Continuity: one step never moves more than the steepest segment.
      const double steep = c.lambda0 * std::max(Tw > 0 ? 1.0 / Tw : 0.0, Td > 0 ? (1 - c.floor_ratio) / Td : 0.0);
      CHECK(std::abs(v - prev) <= steep * (1 + 1e-9) + 1e-12);
      const double slope = v - prev;
      if (!std::isnan(prev_slope) && std::abs(slope - prev_slope) > 1e-9 * c.lambda0) ++kinks;
      prev_slope = slope;
      prev = v;
      if (static_cast<double>(t) >= c.steps - Td) lo_decay = std::min(lo_decay, v);
    }
    CHECK(kinks <= 4);  // each segment boundary can split one step
    if (Td > 0) CHECK(lo_decay == doctest::Approx(c.lambda0 * c.floor_ratio).epsilon(1e-12));
  }
}

TEST_CASE("schedule config validation") {
  ScheduleConfig c;
  c.warmup_frac = 0.7;
  c.decay_frac = 0.4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ScheduleConfig{};
  c.lambda0 = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ScheduleConfig{};
  c.floor_ratio = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ScheduleConfig{};
  c.decay_frac = 0.0;
  c.validate();
  CHECK(lambda_at(c, c.steps).value == c.lambda0);
}

TEST_CASE("total loss arithmetic") {
  DualValue lm, aux;
  lm.value = 2.0;
  aux.value = 3.0;
  lm.grads.emplace("hidden", Tensor::vector({1.0, 2.0}));
  aux.grads.emplace("hidden", Tensor::vector({10.0, -4.0}));
  aux.grads.emplace("p", Tensor::vector({1.0}));
  DualValue t = total_loss(lm, aux, 0.5);
  CHECK(t.value == 3.5);
  CHECK(t.grad("hidden")[0] == 6.0);
  CHECK(t.grad("hidden")[1] == 0.0);
  CHECK(t.grad("p")[0] == 0.5);
  DualValue z = total_loss(lm, aux, 0.0);
  CHECK(z.value == lm.value);
  CHECK(z.grad("hidden") == lm.grad("hidden"));
  aux.value = 0.0;
  aux.flags.insert("empty");
  DualValue e = total_loss(lm, aux, 0.7);
  CHECK(e.value == 2.0);
  CHECK(e.flagged("empty"));
}

TEST_CASE("total loss gradient is linear in lambda") {
  auto batch = th::random_batch(3, 20, 8, 4);
  ToyLMHead head = make_toy_head(16, 8, 4);
  auto loss = make_loss("jfr", 8, 0);
  DualValue lm = toy_ce_loss(batch, head), aux = evaluate(*loss, batch, &head, 0);
  ScheduleConfig c;
  c.steps = 100;
  for (std::size_t t : {0, 10, 25, 60, 90, 100}) {
    const double lam = lambda_at(c, t).value;
    DualValue tot = total_loss(lm, aux, c, t);
    const Tensor& g = tot.grad("hidden");
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double want = lm.grad("hidden")[i] + lam * aux.grad("hidden")[i];
      CHECK(g[i] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("toy cross-entropy") {
  SUBCASE("uniform logits") {
    auto batch = th::random_batch(2, 12, 4, 1, 64);
    ToyLMHead head;
    head.W = Tensor({64, 4});
    CHECK(toy_ce_loss(batch, head).value == doctest::Approx(std::log(64.0)).epsilon(1e-14));
  }
  SUBCASE("single position, two classes") {
    auto batch = th::batch_from(3, 2, {std::vector<double>(6, 0.0)}, {{0, 1}});
    batch.labels = {kIgnoreLabel, 0, kIgnoreLabel};
    ToyLMHead head;
    head.W = Tensor({2, 2}, 1.0);
    CHECK(toy_ce_loss(batch, head).value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
  SUBCASE("confident gold") {
    auto batch = th::batch_from(3, 2, {{0, 0, 50, 0, 0, 0}}, {{1, 2}});
    batch.labels = {kIgnoreLabel, kIgnoreLabel, 0};
    ToyLMHead head;
    head.W = Tensor::matrix(2, 2, {1, 0, -1, 0});
    CHECK(toy_ce_loss(batch, head).value < 1e-40);
  }
  SUBCASE("no labels") {
    auto batch = th::random_batch(2, 12, 4, 1);
    batch.labels.clear();
    CHECK_THROWS_AS(toy_ce_loss(batch, make_toy_head(8, 4, 0)), Error);
  }
}

TEST_CASE("registry") {
  CHECK(find_loss("T3").id == "jfr");
  CHECK(find_loss("t6").id == "mstb_jfr");
  CHECK(find_loss("stp").cell == "STP");
  CHECK_THROWS_AS(find_loss("nope"), ConfigError);
  CHECK(find_loss("jfr").lambda0 < 1.0);
  CHECK(find_loss("T1").lambda0 == 1.0);
  for (const LossSpec& s : loss_catalog()) {
    auto l = make_loss(s.id, 8, 0);
    CHECK(l->id() == s.id);
  }
  CHECK_THROWS_AS(make_loss("jfr", 8, 0, {{"bogus", "1"}}), ConfigError);
  CHECK_THROWS_AS(make_loss("mstb_jfr", 8, 0, {{"scales", "1,x"}}), ConfigError);
  auto m = make_loss("mstb_jfr", 8, 0, {{"scales", "1,4"}, {"margin", "0"}});
  CHECK(dynamic_cast<MstbJfrLoss&>(*m).scales == std::vector<std::size_t>{1, 4});
  CHECK(m->margin == 0);
}
