#include <doctest.h>

#include "helpers.hpp"

#include <numbers>

#include "trajaux/error.hpp"

using namespace trajaux;

TEST_CASE("forward values of basic primitives") {
  Tape t;
  Var z = t.constant(Tensor::vector({0.0, 0.0}));
  const Tensor p = ad::softmax(z).value();
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);

  Var e1 = t.constant(Tensor::vector({1.0, 0.0, 0.0}));
  CHECK(ad::cosine(e1, e1).item() == doctest::Approx(1.0).epsilon(1e-15));

  Var a = t.constant(Tensor(Shape{2, 3}, 0.0));
  Var b = t.constant(Tensor(Shape{3, 4}, 1.0));
  const Tensor c = ad::matmul(a, b).value();
  CHECK(c.shape() == Shape{2, 4});
  CHECK(max_abs(c) == 0.0);
}

TEST_CASE("analytic gradients") {
  SUBCASE("sum of squares") {
    Tape t;
    Var x = t.leaf("x", Tensor::vector({1.0, 2.0}));
    const DualValue dv = t.backward(ad::sum(ad::square(x)));
    CHECK(dv.grad("x")[0] == 2.0);
    CHECK(dv.grad("x")[1] == 4.0);
  }
  SUBCASE("cosine is stationary at alignment") {
    Tape t;
    Var x = t.leaf("x", Tensor::vector({2.0, 4.0, -6.0}));
    Var c = t.constant(Tensor::vector({1.0, 2.0, -3.0}));
    const DualValue dv = t.backward(ad::cosine(x, c));
    CHECK(max_abs(dv.grad("x")) < 1e-15);
  }
  SUBCASE("softmax cross-entropy at uniform logits") {
    Tape t;
    Var z = t.leaf("z", Tensor::vector({0.0, 0.0}));
    Var nll = -ad::sum(ad::take_rows(ad::log_softmax(z), std::vector<std::size_t>{0}));
    const DualValue dv = t.backward(nll);
    CHECK(dv.value == doctest::Approx(std::log(2.0)));
    // oracle: central differences on the closed form
    const auto f = [](const Tensor& x) {
      const double m = std::max(x[0], x[1]);
      return -(x[0] - m - std::log(std::exp(x[0] - m) + std::exp(x[1] - m)));
    };
    const Tensor fd = finite_diff_gradient(f, Tensor::vector({0.0, 0.0}), 1e-6);
    CHECK(dv.grad("z")[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(dv.grad("z")[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(fd[0] == doctest::Approx(dv.grad("z")[0]).epsilon(1e-8));
    CHECK(fd[1] == doctest::Approx(dv.grad("z")[1]).epsilon(1e-8));
  }
}

TEST_CASE("finite_diff_gradient") {
  const Tensor g = finite_diff_gradient([](const Tensor& x) { return x[0] * x[0]; }, Tensor::vector({3.0}), 1e-5);
  CHECK(std::abs(g[0] - 6.0) < 1e-8);
  const Tensor z = finite_diff_gradient([](const Tensor&) { return 4.2; }, Tensor::vector({1.0, 2.0, 3.0}), 1e-5);
  CHECK(max_abs(z) == 0.0);
  CHECK_THROWS_AS(finite_diff_gradient([](const Tensor&) { return 0.0; }, Tensor::vector({1.0}), 0.0), ConfigError);
}

TEST_CASE("every primitive matches central differences") {
  Rng rng(11);
  Tensor A = th::randn({3, 4}, rng), Bm = th::randn({4, 5}, rng), r = th::randn({1, 4}, rng);
  Tensor pos = th::randn({3, 4}, rng);
  for (double& v : pos.data()) v = 0.5 + std::abs(v);
  Tensor unit = th::randn({3, 4}, rng, 0.2);
  std::map<std::string, Tensor*> leaves{{"A", &A}, {"B", &Bm}, {"r", &r}, {"pos", &pos}, {"unit", &unit}};
  const auto build = [&](Tape& t) {
    Var a = t.leaf("A", A), b = t.leaf("B", Bm), rr = t.leaf("r", r), p = t.leaf("pos", pos), u = t.leaf("unit", unit);
    Var m = ad::matmul(a, b);                            // 3 x 5
    Var s1 = ad::sum(ad::tanh(m) * ad::sigmoid(m));
    Var s2 = ad::mean(ad::gelu(a + rr) / p);             // broadcasting
    Var s3 = ad::sum(ad::log(p) * ad::sqrt(p) - ad::exp(u));
    Var s4 = ad::sum(ad::logsumexp(a, 1)) + ad::sum(ad::max(a * 1.3, 0));
    Var s5 = ad::sum(ad::softmax(a, -1, 0.7) * p) + ad::sum(ad::log_softmax(a, 0) * u);
    Var s6 = ad::sum(ad::arccos(u)) + ad::sum(ad::gelu_prime(a)) + ad::sum(ad::abs(a) * ad::relu(u + 0.05));
    Var s7 = ad::sum(ad::cosine(a, p)) + ad::sum(ad::norm(ad::transpose(a)));
    const std::size_t rows[] = {2, 0, 2};
    const Var parts[] = {ad::take_rows(a, rows), p};
    Var s8 = ad::sum(ad::square(ad::concat(parts, 0))) + ad::sum(ad::reshape(a, Shape{12}) * ad::reshape(u, Shape{12}));
    Var s9 = ad::mean(a, 0, true) * 2.0 - ad::sum(p, 1, true);
    return s1 + s2 + s3 + s4 + s5 + s6 + s7 + s8 + ad::sum(s9) + ad::sum(ad::scale(ad::shift(ad::neg(a), 1.0), 0.5));
  };
  const auto checks = check_gradients(build, leaves, {});
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.rel_err < 1e-7);
  }
}

TEST_CASE("backward is linear in the root") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = th::randn({6}, rng);
    const double a = rng.normal(), b = rng.normal();
    const auto grad_of = [&](int which) {
      Tape t;
      Var x = t.leaf("x", x0);
      Var l1 = ad::sum(ad::tanh(x) * x);
      Var l2 = ad::logsumexp(x, 0);
      Var root = which == 0 ? l1 : which == 1 ? l2 : a * l1 + b * l2;
      return t.backward(root).grad("x");
    };
    const Tensor g1 = grad_of(0), g2 = grad_of(1), g = grad_of(2);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-12));
  }
}

TEST_CASE("stop_gradient equals a frozen leaf") {
  Rng rng(3);
  const Tensor x0 = th::randn({5}, rng), y0 = th::randn({5}, rng);
  Tape t1;
  Var x1 = t1.leaf("x", x0);
  Var y1 = t1.leaf("y", y0);
  const DualValue d1 = t1.backward(ad::sum(ad::square(x1 - t1.stop_gradient(y1 * x1))));
  Tape t2;
  Var x2 = t2.leaf("x", x0);
  Var c2 = t2.constant(Tensor(y0.shape(), [&] {
    std::vector<double> v(5);
    for (std::size_t i = 0; i < 5; ++i) v[i] = y0[i] * x0[i];
    return v;
  }()));
  const DualValue d2 = t2.backward(ad::sum(ad::square(x2 - c2)));
  CHECK(d1.grad("x") == d2.grad("x"));
  CHECK(max_abs(d1.grad("y")) == 0.0);
}

TEST_CASE("tape leaves and frozen parameters") {
  Tape t;
  Var a = t.leaf("w", Tensor::vector({1.0, 2.0}));
  Var b = t.leaf("w", Tensor::vector({7.0, 7.0}));
  CHECK(a.id() == b.id());
  Var f = t.param("frozen", Tensor::vector({3.0, 4.0}), true);
  const DualValue dv = t.backward(ad::sum(a * b) + ad::sum(f * a));
  CHECK(dv.grad("w")[0] == doctest::Approx(2.0 * 1.0 + 3.0));
  REQUIRE(dv.has_grad("frozen"));
  CHECK(max_abs(dv.grad("frozen")) == 0.0);
}

TEST_CASE("shape errors are raised") {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{4, 2}));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(a + b, ShapeError);
}

// ---------------------------------------------------------------------------
// trajectory model

TEST_CASE("eos_clip examples") {
  TrajectoryBatch b;
  b.hidden = Tensor(Shape{3, 20, 2});
  b.spans = {{3, 15}, {0, 3}, {5, 12}};
  const ClippedSpan c = eos_clip(b, 2, 3);
  CHECK(c.ranges[0] == Span{3, 13});
  CHECK(!c.kept(1));
  CHECK(c.kept(2));
  const ClippedSpan id = eos_clip(b, 0, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(id.ranges[i] == b.spans[i]);
}

TEST_CASE("eos_clip is monotone in the margin") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const TrajectoryBatch b = th::random_batch(4, 30, 2, rng.bits(), 4, {}, 1);
    std::size_t prev_total = SIZE_MAX;
    for (std::size_t m = 0; m < 6; ++m) {
      const ClippedSpan c = eos_clip(b, m, 1);
      std::size_t total = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        if (c.kept(i)) total += c.ranges[i].length();
        if (c.kept(i)) CHECK(c.ranges[i].length() <= b.spans[i].length());
      }
      CHECK(total <= prev_total);
      prev_total = total;
    }
  }
}

TEST_CASE("synth_batch is deterministic and valid") {
  SynthConfig cfg;
  cfg.seed = 17;
  const ToyLMHead head = make_toy_head(cfg.V, cfg.D, 17);
  const TrajectoryBatch a = synth_batch(cfg, &head), b = synth_batch(cfg, &head);
  CHECK(a.hidden == b.hidden);
  CHECK(a.spans == b.spans);
  CHECK(a.labels == b.labels);
  CHECK_NOTHROW(a.validate());
  cfg.curvature = 1.5;
  CHECK_THROWS_AS(synth_batch(cfg), ConfigError);
}

TEST_CASE("head_logits") {
  ToyLMHead head;
  head.W = Tensor(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) head.W.at(i, i) = 1.0;
  CHECK(max_abs(head_logits(head, Tensor(Shape{2, 3}))) == 0.0);
  const Tensor e = head_logits(head, Tensor::matrix(1, 3, {1.0, 0.0, 0.0}));
  CHECK(e.vec() == std::vector<double>{1.0, 0.0, 0.0});

  Rng rng(4);
  const ToyLMHead h = make_toy_head(12, 5, 4);
  const Tensor h1 = th::randn({3, 5}, rng), h2 = th::randn({3, 5}, rng);
  Tape t;
  const Tensor p = ad::softmax(t.constant(head_logits(h, h1))).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t v = 0; v < 12; ++v) s += p.at(i, v);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  const double a = 0.7, b = -1.9;
  Tensor mix(h1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * h1[i] + b * h2[i];
  const Tensor lm = head_logits(h, mix), l1 = head_logits(h, h1), l2 = head_logits(h, h2);
  for (std::size_t i = 0; i < lm.size(); ++i) CHECK(std::abs(lm[i] - (a * l1[i] + b * l2[i])) < 1e-12);
}

TEST_CASE("sketcher") {
  Rng rng(2);
  Sketcher zero = make_sketcher(4, 6, SketchInit::SmallGaussian, false, 1);
  for (double& v : zero.P.data()) v = 0.0;
  CHECK(max_abs(sketch(zero, th::randn({5, 6}, rng))) == 0.0);

  const Sketcher frozen = make_sketcher(4, 6, SketchInit::Xavier, true, 1);
  Tape t;
  Var x = t.leaf("x", th::randn({5, 6}, rng));
  const DualValue dv = t.backward(ad::sum(ad::square(sketch(t, frozen, x, "P"))));
  REQUIRE(dv.has_grad("P"));
  CHECK(max_abs(dv.grad("P")) == 0.0);
  CHECK(max_abs(dv.grad("x")) > 0.0);

  // Xavier entry scale D^{-1/2}
  const std::size_t D = 100;
  const Sketcher big = make_sketcher(100, D, SketchInit::Xavier, true, 3);
  double ss = 0.0;
  for (double v : big.P.data()) ss += v * v;
  const double sd = std::sqrt(ss / static_cast<double>(big.P.size()));
  CHECK(std::abs(sd * std::sqrt(static_cast<double>(D)) - 1.0) < 0.1);
}
