#include "trajaux/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "trajaux/error.hpp"
#include "trajaux/rng.hpp"

namespace trajaux {

void TrajectoryBatch::validate() const {
  if (hidden.rank() != 3) throw ShapeError("hidden must be B x S x D, got " + shape_str(hidden.shape()));
  const std::size_t b = B(), s = S();
  if (spans.size() != b) {
    throw DataError("span table has " + std::to_string(spans.size()) + " rows for batch of " +
                    std::to_string(b));
  }
  for (std::size_t i = 0; i < b; ++i) {
    const Span& sp = spans[i];
    if (!(sp.lo < sp.hi && sp.hi <= s)) {
      throw DataError("row " + std::to_string(i) + ": span [" + std::to_string(sp.lo) + ", " +
                      std::to_string(sp.hi) + ") invalid for S = " + std::to_string(s));
    }
  }
  for (const auto& [layer, t] : layer_stack) {
    if (t.shape() != hidden.shape()) {
      throw ShapeError("layer " + std::to_string(layer) + " has shape " + shape_str(t.shape()) +
                       ", hidden is " + shape_str(hidden.shape()));
    }
  }
  if (!labels.empty() && labels.size() != b * s) {
    throw ShapeError("labels must be B x S = " + std::to_string(b * s) + " entries, got " +
                     std::to_string(labels.size()));
  }
  if (!prompt_spans.empty()) {
    if (prompt_spans.size() != b) throw DataError("prompt span table length does not match B");
    for (const Span& sp : prompt_spans) {
      if (sp.hi > s || sp.hi < sp.lo) throw DataError("prompt span out of range");
    }
  }
  if (!hidden.all_finite()) throw DataError("hidden states contain non-finite values");
}

std::size_t ClippedSpan::kept_count() const {
  return static_cast<std::size_t>(std::count(dropped.begin(), dropped.end(), false));
}

ClippedSpan eos_clip(const TrajectoryBatch& batch, std::size_t margin, std::size_t min_len) {
  ClippedSpan c;
  c.ranges.reserve(batch.spans.size());
  for (const Span& sp : batch.spans) {
    const std::size_t hi = sp.hi >= sp.lo + margin ? sp.hi - margin : sp.lo;
    Span r{sp.lo, hi};
    c.ranges.push_back(r);
    c.dropped.push_back(r.length() < min_len || r.length() == 0);
  }
  return c;
}

ToyLMHead make_toy_head(std::size_t V, std::size_t D, std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x4ead));
  ToyLMHead h;
  h.W = Tensor(Shape{V, D}, rng.normal_vector(V * D, 1.0 / std::sqrt(static_cast<double>(D))));
  return h;
}

namespace {

std::vector<double> unit_vector(Rng& rng, std::size_t D) {
  std::vector<double> v = rng.normal_vector(D);
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

struct RowCurve {
  std::vector<double> origin, dir, w1, w2, w3;
  double f1 = 1.0, f2 = 1.5, p1 = 0.0, p2 = 0.0, p3 = 0.0;
};

constexpr double kAmplitude = 1.5;

}  // namespace

TrajectoryBatch synth_batch(const SynthConfig& cfg, const ToyLMHead* head) {
  if (!(cfg.curvature >= 0.0 && cfg.curvature <= 1.0)) {
    throw ConfigError("curvature knob must lie in [0, 1]");
  }
  if (cfg.B == 0 || cfg.D == 0) throw ConfigError("synth batch needs B >= 1 and D >= 1");
  if (cfg.min_span == 0 || cfg.min_span > cfg.max_span) throw ConfigError("bad span length range");
  // One prompt token before the span and one end-of-turn slot after it.
  if (cfg.S < cfg.max_span + 2) {
    throw ConfigError("S = " + std::to_string(cfg.S) + " too small for spans up to " +
                      std::to_string(cfg.max_span) + " tokens");
  }
  if (head && head->D() != cfg.D) throw ShapeError("head width does not match D");

  const std::size_t B = cfg.B, S = cfg.S, D = cfg.D;
  const double c = cfg.curvature;
  const double twopi = 2.0 * std::numbers::pi;
  Rng rng(Rng::mix(cfg.seed, 0x5eed));

  TrajectoryBatch batch;
  batch.hidden = Tensor(Shape{B, S, D});
  Tensor clean(Shape{B, S, D});
  std::vector<RowCurve> curves(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t L = cfg.min_span + rng.index(cfg.max_span - cfg.min_span + 1);
    const std::size_t lo = 1 + rng.index(S - L - 1);
    batch.spans.push_back(Span{lo, lo + L});
    batch.prompt_spans.push_back(Span{0, lo});

    RowCurve& rc = curves[b];
    rc.origin = rng.normal_vector(D);
    rc.dir = unit_vector(rng, D);
    rc.w1 = unit_vector(rng, D);
    rc.w2 = unit_vector(rng, D);
    rc.w3 = unit_vector(rng, D);
    rc.f1 = 0.5 + rng.uniform();
    rc.f2 = 1.0 + rng.uniform();
    rc.p1 = twopi * rng.uniform();
    rc.p2 = twopi * rng.uniform();
    rc.p3 = twopi * rng.uniform();
    for (std::size_t t = 0; t < S; ++t) {
      const double tt = static_cast<double>(t);
      const double s1 = std::sin(twopi * rc.f1 * tt / S + rc.p1);
      const double s2 = std::sin(twopi * rc.f2 * tt / S + rc.p2);
      for (std::size_t d = 0; d < D; ++d) {
        double v = rc.origin[d] + (cfg.step * tt) * rc.dir[d];
        if (c != 0.0) v += c * kAmplitude * (s1 * rc.w1[d] + s2 * rc.w2[d]);
        clean.at(b, t, d) = v;
      }
    }
  }
  batch.hidden = clean;
  if (cfg.noise > 0.0) {
    for (double& v : batch.hidden.data()) v += cfg.noise * rng.normal();
  }

  // Shallower layers carry less of the final deflection and more of a
  // slower mode, so depth reads as progressive smoothing.
  for (int layer : cfg.layers) {
    if (layer == cfg.final_layer) {
      batch.layer_stack[layer] = batch.hidden;
      continue;
    }
    const double f = std::clamp(static_cast<double>(layer) / cfg.final_layer, 0.0, 1.0);
    Tensor t3(Shape{B, S, D});
    for (std::size_t b = 0; b < B; ++b) {
      const RowCurve& rc = curves[b];
      for (std::size_t t = 0; t < S; ++t) {
        const double tt = static_cast<double>(t);
        const double s1 = std::sin(twopi * rc.f1 * tt / S + rc.p1);
        const double s2 = std::sin(twopi * rc.f2 * tt / S + rc.p2);
        const double s3 = std::sin(std::numbers::pi * tt / S + rc.p3);
        for (std::size_t d = 0; d < D; ++d) {
          double v = rc.origin[d] + (cfg.step * tt) * rc.dir[d];
          if (c != 0.0) {
            v += c * kAmplitude * (f * (s1 * rc.w1[d] + s2 * rc.w2[d]) + (1.0 - f) * s3 * rc.w3[d]);
          }
          t3.at(b, t, d) = v;
        }
      }
    }
    if (cfg.noise > 0.0) {
      for (double& v : t3.data()) v += cfg.noise * rng.normal();
    }
    batch.layer_stack[layer] = std::move(t3);
  }

  if (head && cfg.with_labels) {
    batch.labels.assign(B * S, kIgnoreLabel);
    const Tensor& W = head->W;
    const std::size_t V = head->V();
    for (std::size_t b = 0; b < B; ++b) {
      const Span sp = batch.spans[b];
      for (std::size_t j = sp.lo; j < std::min(sp.hi + 1, S); ++j) {
        const std::size_t t = j - 1;
        std::size_t best = 0;
        double bestv = -INFINITY;
        for (std::size_t v = 0; v < V; ++v) {
          double z = 0.0;
          for (std::size_t d = 0; d < D; ++d) z += W.at(v, d) * clean.at(b, t, d);
          if (z > bestv) {
            bestv = z;
            best = v;
          }
        }
        batch.labels[b * S + j] = static_cast<int>(best);
      }
    }
  }
  batch.validate();
  return batch;
}

Tensor head_logits(const ToyLMHead& head, const Tensor& h) {
  const std::size_t D = head.D(), V = head.V();
  if (h.rank() == 0 || h.shape().back() != D) {
    throw ShapeError("head_logits: last extent of " + shape_str(h.shape()) + " must be " +
                     std::to_string(D));
  }
  Shape out_shape = h.shape();
  out_shape.back() = V;
  Tensor out(out_shape);
  const std::size_t n = h.size() / D;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < V; ++v) {
      double z = 0.0;
      for (std::size_t d = 0; d < D; ++d) z += head.W[v * D + d] * h[i * D + d];
      out[i * V + v] = z;
    }
  return out;
}

Var head_logits(Tape& tape, const ToyLMHead& head, Var h, const std::string& name) {
  const std::size_t D = head.D();
  const Shape& hs = h.shape();
  if (hs.empty() || hs.back() != D) {
    throw ShapeError("head_logits: last extent of " + shape_str(hs) + " must be " + std::to_string(D));
  }
  Var W = tape.param(name, head.W, true);
  Var flat = hs.size() == 2 ? h : ad::reshape(h, Shape{h.value().size() / D, D});
  Var z = ad::matmul(flat, ad::transpose(W));
  if (hs.size() == 2) return z;
  Shape out = hs;
  out.back() = head.V();
  return ad::reshape(z, out);
}

Sketcher make_sketcher(std::size_t dprime, std::size_t D, SketchInit init, bool frozen,
                       std::uint64_t seed, double small_scale) {
  Rng rng(Rng::mix(seed, 0x5c7));
  const double scale =
      init == SketchInit::Xavier ? 1.0 / std::sqrt(static_cast<double>(D)) : small_scale;
  return Sketcher{Tensor(Shape{dprime, D}, rng.normal_vector(dprime * D, scale)), frozen, init};
}

Tensor sketch(const Sketcher& s, const Tensor& x) {
  const std::size_t dp = s.P.dim(0), D = s.P.dim(1);
  if (x.rank() != 2 || x.dim(1) != D) {
    throw ShapeError("sketch: input " + shape_str(x.shape()) + " incompatible with sketcher " +
                     shape_str(s.P.shape()));
  }
  const std::size_t N = x.dim(0);
  Tensor out(Shape{N, dp});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < dp; ++j) {
      double z = 0.0;
      for (std::size_t d = 0; d < D; ++d) z += x[i * D + d] * s.P[j * D + d];
      out[i * dp + j] = z;
    }
  return out;
}

Var sketch(Tape& tape, const Sketcher& s, Var x, const std::string& name) {
  Var P = tape.param(name, s.P, s.frozen);
  return ad::matmul(x, ad::transpose(P));
}

}  // namespace trajaux
