#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "trajaux/dist_losses.hpp"
#include "trajaux/error.hpp"

using namespace trajaux;

namespace {

double atom(double c) { return 1.0 - 2.0 * std::sqrt(2.0 / 3.0) * std::exp(-c * c / 6.0) + 1.0 / std::sqrt(2.0); }

Tensor column(const std::vector<double>& v) { return Tensor({v.size(), 1}, v); }

}  // namespace

TEST_CASE("epps-pulley single atom and quadrature") {
  const double want = 1.0 - 2.0 * std::sqrt(2.0 / 3.0) + 1.0 / std::sqrt(2.0);
  CHECK(want == doctest::Approx(0.07417).epsilon(1e-4));
  CHECK(epps_pulley(std::vector<double>{0.0}) == doctest::Approx(want).epsilon(1e-14));
  CHECK(epps_pulley(std::vector<double>{0.0}) == doctest::Approx(oracle::ep_quadrature({0.0})).epsilon(1e-6));
  Rng rng(9);
  for (int i = 0; i < 10; ++i) {
    auto u = rng.normal_vector(1 + rng.index(12), 1.5);
    CHECK(epps_pulley(u) == doctest::Approx(oracle::ep_quadrature(u)).epsilon(1e-6));
  }
  CHECK_THROWS_AS(epps_pulley(std::vector<double>{}), Error);
}

TEST_CASE("epps-pulley on normal draws, ordering, sign") {
  Rng rng(123);
  auto u = rng.normal_vector(10000);
  const double v = epps_pulley(u);
  CHECK(v < 0.005);
  CHECK(v >= 0.0);
  auto shuffled = u;
  std::reverse(shuffled.begin(), shuffled.end());
  std::rotate(shuffled.begin(), shuffled.begin() + 17, shuffled.end());
  CHECK(epps_pulley(shuffled) == doctest::Approx(v).epsilon(1e-12));
  auto neg = u;
  for (double& x : neg) x = -x;
  CHECK(epps_pulley(neg) == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("epps-pulley Var form matches the scalar form per column") {
  Rng rng(5);
  Tensor u = th::randn({7, 3}, rng);
  Tape tape;
  const Tensor got = epps_pulley(tape.constant(u)).value();
  for (std::size_t m = 0; m < 3; ++m) {
    std::vector<double> col;
    for (std::size_t i = 0; i < 7; ++i) col.push_back(u.at(i, m));
    CHECK(got[m] == doctest::Approx(epps_pulley(col)).epsilon(1e-13));
  }
}

TEST_CASE("sigreg state with a zero sketcher is the single-atom value") {
  auto batch = th::random_batch(3, 20, 8, 1);
  SigregStateLoss loss(8, SketchedOptions{16, 8}, 0);
  for (double& p : loss.sketcher.P.data()) p = 0.0;
  CHECK(evaluate(loss, batch, nullptr, 3).value == doctest::Approx(atom(0.0)).epsilon(1e-13));
}

TEST_CASE("sigreg tangent: constant trajectory and single direction") {
  SUBCASE("constant") {
    auto b = th::batch_from(8, 2, {std::vector<double>(16, 0.5)}, {{0, 8}});
    SigregTangentLoss loss(2, SketchedOptions{4, 4}, 0);
    DualValue v = evaluate(loss, b, nullptr, 0);
    CHECK(v.value == 0.0);
    CHECK(v.flagged("empty"));
  }
  SUBCASE("all tangents e1") {
    std::vector<double> row;
    for (int t = 0; t < 10; ++t) row.insert(row.end(), {0.5 * t, 1.0, -2.0});
    auto b = th::batch_from(10, 3, {row}, {{0, 10}});
    SketchedOptions o{4, 6};
    SigregTangentLoss loss(3, o, 2);
    const std::uint64_t seed = 11;
    // Directions come from the per-evaluation stream.
    Rng rng(Rng::mix(seed, 0xd2));
    const Tensor dirs = random_directions(o.directions, o.dprime, rng);
    double want = 0.0;
    for (std::size_t l = 0; l < o.directions; ++l) {
      double c = 0.0;
      for (std::size_t j = 0; j < o.dprime; ++j) c += dirs.at(l, j) * loss.sketcher.P.at(j, 0);
      want += atom(c);
    }
    want /= o.directions;
    CHECK(evaluate(loss, b, nullptr, seed).value == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("cf distance") {
  CHECK(cf_distance(std::vector<double>{0.0}, std::vector<double>{2.0}) ==
        doctest::Approx(2.0 - 2.0 * std::exp(-1.0)).epsilon(1e-14));
  CHECK(cf_distance(std::vector<double>{0.0}, std::vector<double>{2.0}) == doctest::Approx(1.2642).epsilon(1e-4));
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    auto x = rng.normal_vector(1 + rng.index(6)), y = rng.normal_vector(1 + rng.index(6));
    CHECK(cf_distance(x, y) == doctest::Approx(cf_distance(y, x)).epsilon(1e-14));
    CHECK(std::abs(cf_distance(x, x)) < 1e-14);
    CHECK(cf_distance(x, y) >= -1e-14);
  }
}

TEST_CASE("stp-cmf on a straight line is zero") {
  std::vector<double> row;
  for (int t = 0; t < 14; ++t) row.insert(row.end(), {1.0 * t, -0.5 * t, 2.0});
  auto b = th::batch_from(14, 3, {row}, {{0, 14}});
  StpCmfLoss loss(3, SketchedOptions{4, 4}, 0);
  CHECK(std::abs(evaluate(loss, b, nullptr, 0).value) < 1e-14);
}

TEST_CASE("sectional curvature and its variance") {
  Tape tape;
  // Row 0: straight. Row 1: (0,0), (1, sqrt 2), (2,0) gives kappa = 2.
  std::vector<double> r0{0, 0, 1, 1, 2, 2}, r1{0, 0, 1, std::sqrt(2.0), 2, 0};
  Var h = tape.leaf("hidden", Tensor({2, 3, 2}, [&] {
                      auto v = r0;
                      v.insert(v.end(), r1.begin(), r1.end());
                      return v;
                    }()));
  Var k = sectional_curvature(h, {IndexDraw<3>{0, {0, 1, 2}}, IndexDraw<3>{1, {0, 1, 2}}});
  CHECK(std::abs(k.value()[0]) < 1e-15);
  CHECK(k.value()[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(ad::mean(ad::square(k - ad::mean(k))).item() == doctest::Approx(1.0).epsilon(1e-14));

  SUBCASE("equal-step line scores zero through the loss") {
    std::vector<double> line;
    for (int t = 0; t < 12; ++t) line.insert(line.end(), {2.0 * t, 1.0 - t});
    auto b = th::batch_from(12, 2, {line, line}, {{0, 12}, {0, 12}});
    SectionalLoss loss;
    CHECK(std::abs(evaluate(loss, b, nullptr, 4).value) < 1e-20);
  }
  SUBCASE("circle gives equal curvature for equal steps") {
    std::vector<double> circ;
    for (int t = 0; t < 12; ++t) circ.insert(circ.end(), {std::cos(0.2 * t), std::sin(0.2 * t)});
    // Every symmetric triple with the same step has the same curvature; one
    // step only via a span of exactly three positions.
    auto b = th::batch_from(12, 2, {circ, circ, circ}, {{0, 5}, {3, 8}, {6, 11}});
    SectionalLoss loss(1);
    loss.margin = 2;
    loss.min_len = 3;
    CHECK(std::abs(evaluate(loss, b, nullptr, 0).value) < 1e-20);
  }
}

TEST_CASE("vicreg variance and covariance terms") {
  Tape tape;
  SUBCASE("constant") {
    Var z = tape.constant(Tensor({5, 3}, 2.0));
    CHECK(vicreg_vc(z).item() == doctest::Approx(1.0 - std::sqrt(1e-4)).epsilon(1e-14));
    CHECK(vicreg_vc(z).item() == doctest::Approx(0.99).epsilon(1e-14));
  }
  SUBCASE("unit variance, diagonal covariance") {
    // Columns +-1 in a balanced orthogonal pattern.
    Var z = tape.constant(Tensor::matrix(4, 2, {1, 1, 1, -1, -1, 1, -1, -1}));
    // sqrt(1 + eps) > 1 so the hinge is inactive.
    CHECK(std::abs(vicreg_vc(z).item()) < 1e-15);
  }
  SUBCASE("perfectly correlated unit-variance columns") {
    Var z = tape.constant(Tensor::matrix(2, 2, {1, 1, -1, -1}));
    // C_01 = C_10 = 1; penalty = (1 + 1) / (2 * 1).
    CHECK(vicreg_vc(z).item() == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("sliced quantile loss") {
  Tape tape;
  CHECK(sw_iso(tape.constant(column({0.0}))).item() == 0.0);
  const double q = normal_quantile(0.75);
  CHECK(q == doctest::Approx(0.67449).epsilon(1e-5));
  const double want = ((-1 + q) * (-1 + q) + (1 - q) * (1 - q)) / 2;
  CHECK(want == doctest::Approx(0.10596).epsilon(1e-4));
  CHECK(sw_iso(tape.constant(column({1.0, -1.0}))).item() == doctest::Approx(want).epsilon(1e-6));
  std::vector<double> mids;
  for (int i = 1; i <= 7; ++i) mids.push_back(normal_quantile((i - 0.5) / 7));
  std::reverse(mids.begin(), mids.end());
  CHECK(std::abs(sw_iso(tape.constant(column(mids))).item()) < 1e-28);
}

TEST_CASE("hutchinson trace within 2 percent") {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(s);
    const std::size_t d = 16;
    Tensor A({d, d});
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) A.at(i, j) = (i == j ? 5.0 + rng.normal() : 0.3 * rng.normal());
    for (std::size_t i = 0; i < d; ++i) tr += A.at(i, i);
    auto quad = [&](const std::vector<double>& v) {
      double q = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) q += v[i] * A.at(i, j) * v[j];
      return q;
    };
    CHECK(hutchinson_trace(quad, d, 10000, rng) == doctest::Approx(tr).epsilon(0.02));
  }
}

TEST_CASE("score matching with a zero network is the pure penalty") {
  auto batch = th::random_batch(2, 16, 4, 6);
  ScoreOptions o;
  o.raw = true;
  o.width = 8;
  o.lambda_sm = 0.5;
  ScoreMatchLoss loss(4, o, 0);
  for (double& w : loss.l2.W.data()) w = 0.0;
  for (double& w : loss.l2.b.data()) w = 0.0;
  const ClippedSpan clip = eos_clip(batch, loss.margin, loss.min_len);
  double e = 0.0;
  std::size_t n = 0;
  for (auto [b, t] : pooled_positions(clip)) {
    for (std::size_t d = 0; d < 4; ++d) e += batch.hidden.at(b, t, d) * batch.hidden.at(b, t, d);
    ++n;
  }
  CHECK(evaluate(loss, batch, nullptr, 0).value == doctest::Approx(0.5 * e / n).epsilon(1e-13));
}

TEST_CASE("cpc examples") {
  SUBCASE("one usable row") {
    auto batch = th::random_batch(1, 16, 4, 3);
    CpcLoss loss(4, 2, 0.07, 0);
    DualValue v = evaluate(loss, batch, nullptr, 0);
    CHECK(v.value == 0.0);
    CHECK(v.flagged("empty"));
  }
  SUBCASE("equal scores give log B") {
    auto batch = th::random_batch(3, 16, 4, 3);
    CpcLoss loss(4, 2, 0.07, 0);
    for (double& w : loss.pred.W.data()) w = 0.0;
    CHECK(evaluate(loss, batch, nullptr, 0).value == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  }
  SUBCASE("own pair +1, others -1") {
    Tape tape;
    Var logits = tape.constant(Tensor::matrix(2, 2, {1 / 0.07, -1 / 0.07, -1 / 0.07, 1 / 0.07}));
    CHECK(diagonal_ce(logits).item() == doctest::Approx(std::log1p(std::exp(-2 / 0.07))).epsilon(1e-9));
  }
}

TEST_CASE("byol target receives no gradient and tracks the online net") {
  auto batch = th::random_batch(3, 20, 6, 17);
  ByolLoss loss(6, 16, 8, 0.996, 0);
  DualValue v = evaluate(loss, batch, nullptr, 0);
  CHECK(v.value >= 0.0);
  CHECK(v.value <= 4.0);
  bool saw_target = false;
  for (const auto& [name, g] : v.grads) {
    if (name.rfind("byol.target", 0) != 0) continue;
    saw_target = true;
    for (double x : g.data()) CHECK(x == 0.0);
  }
  CHECK(saw_target);

  SUBCASE("ema arithmetic") {
    for (auto& l : loss.target.layers) {
      for (double& w : l.W.data()) w = 0.0;
      for (double& w : l.b.data()) w = 0.0;
    }
    for (auto& l : loss.online.layers) {
      for (double& w : l.W.data()) w = 1.0;
      for (double& w : l.b.data()) w = 1.0;
    }
    loss.ema_tick();
    CHECK(loss.target.layers[0].W[0] == doctest::Approx(0.004).epsilon(1e-14));
    for (int n = 1; n < 500; ++n) loss.ema_tick();
    CHECK(loss.target.layers[1].b[0] == doctest::Approx(1.0 - std::pow(0.996, 500)).epsilon(1e-12));
    Mlp fixed = loss.online;
    ema_update(fixed, loss.online, 0.996);
    CHECK(fixed.layers[0].W == loss.online.layers[0].W);
  }
}

TEST_CASE("ijepa frozen target has a zero gradient") {
  auto batch = th::random_batch(3, 20, 6, 19);
  IjepaOptions o;
  o.width = 16;
  o.posemb_dim = 8;
  IjepaLoss loss(6, o, 0);
  DualValue v = evaluate(loss, batch, nullptr, 0);
  REQUIRE(v.has_grad("ijepa.target.W"));
  for (double x : v.grad("ijepa.target.W").data()) CHECK(x == 0.0);
  CHECK(v.value > 0.0);
}

TEST_CASE("stp-cmf sketcher is frozen") {
  auto batch = th::random_batch(3, 20, 6, 23);
  StpCmfLoss loss(6, SketchedOptions{8, 8}, 0);
  DualValue v = evaluate(loss, batch, nullptr, 0);
  REQUIRE(v.has_grad("stp_cmf.sketch"));
  for (double x : v.grad("stp_cmf.sketch").data()) CHECK(x == 0.0);
}
