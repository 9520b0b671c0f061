#include "trajaux/decoder_visible.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trajaux/error.hpp"

namespace trajaux {

namespace {

using PosList = std::vector<std::pair<std::size_t, std::size_t>>;

std::vector<double> logits_of(const ToyLMHead& head, std::span<const double> h) {
  const std::size_t V = head.V(), D = head.D();
  if (h.size() != D) throw ShapeError("head expects width " + std::to_string(D));
  std::vector<double> z(V, 0.0);
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t d = 0; d < D; ++d) z[v] += head.W[v * D + d] * h[d];
  return z;
}

std::vector<double> softmax_vec(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (double& x : p) x /= s;
  return p;
}

}  // namespace

Tensor softmax_rows(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (logits.rank() != 2) throw ShapeError("softmax_rows: expected N x V");
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  Tensor out(logits.shape());
  std::vector<double> row(V);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t v = 0; v < V; ++v) row[v] = logits[i * V + v] / temperature;
    const auto p = softmax_vec(row);
    std::copy(p.begin(), p.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * V));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fisher norm

double fisher_norm_sq(const ToyLMHead& head, std::span<const double> h, std::span<const double> v) {
  const auto p = softmax_vec(logits_of(head, h));
  const auto wv = logits_of(head, v);
  double mean = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) mean += p[i] * wv[i];
  double var = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) var += p[i] * (wv[i] - mean) * (wv[i] - mean);
  return var;
}

Tensor fisher_matrix(const ToyLMHead& head, std::span<const double> h) {
  const std::size_t V = head.V(), D = head.D();
  const auto p = softmax_vec(logits_of(head, h));
  Tensor G(Shape{D, D});
  for (std::size_t a = 0; a < D; ++a)
    for (std::size_t b = 0; b < D; ++b) {
      double diag = 0.0, pa = 0.0, pb = 0.0;
      for (std::size_t y = 0; y < V; ++y) {
        diag += p[y] * head.W[y * D + a] * head.W[y * D + b];
        pa += p[y] * head.W[y * D + a];
        pb += p[y] * head.W[y * D + b];
      }
      G.at(a, b) = diag - pa * pb;
    }
  return G;
}

Var frozen_probs(Tape& tape, const ToyLMHead& head, Var h, double temperature) {
  return tape.stop_gradient(ad::softmax(head_logits(tape, head, h), -1, temperature));
}

Var fisher_norm_sq(Tape& tape, const ToyLMHead& head, Var p, Var v) {
  Var z = head_logits(tape, head, v);
  Var c = z - ad::sum(p * z, -1, true);
  return ad::sum(p * ad::square(c), -1);
}

// ---------------------------------------------------------------------------
// Margin weights

double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw DataError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

MarginWeights margin_weights(const Tensor& logits, std::span<const int> labels, const MarginWeightConfig& cfg) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("margin_weights: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  MarginWeights mw;
  mw.w.assign(N, 1.0);
  mw.margin.assign(N, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> finite;
  for (std::size_t i = 0; i < N; ++i) {
    const int y = labels[i];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= V) throw DataError("label " + std::to_string(y) + " out of vocabulary");
    double other = -INFINITY;
    for (std::size_t v = 0; v < V; ++v)
      if (v != static_cast<std::size_t>(y)) other = std::max(other, logits[i * V + v]);
    const double m = logits[i * V + static_cast<std::size_t>(y)] - other;
    mw.margin[i] = m;
    if (std::isfinite(m)) finite.push_back(m);
  }
  if (finite.empty()) return mw;
  mw.empty = false;
  mw.tau = quantile(finite, cfg.q);
  for (std::size_t i = 0; i < N; ++i) {
    const double m = mw.margin[i];
    if (std::isnan(m)) continue;
    mw.w[i] = 1.0 / (1.0 + std::exp(-cfg.gamma * (mw.tau - m)));
  }
  return mw;
}

std::vector<int> next_token_labels(const TrajectoryBatch& batch) {
  const std::size_t B = batch.B(), S = batch.S();
  std::vector<int> out(B * S, kIgnoreLabel);
  if (!batch.has_labels()) return out;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t + 1 < S; ++t) out[b * S + t] = batch.label(b, t + 1);
  return out;
}

// ---------------------------------------------------------------------------
// Fisher JFR family

LossOutput fisher_stencil_loss(Tape& tape, Var J, Var hidden, const ToyLMHead& head, const ClippedSpan& clip,
                               const std::vector<std::size_t>& scales,
                               const std::vector<std::vector<bool>>* valid, const std::vector<double>* weights) {
  const std::size_t S = hidden.shape().at(1);
  std::vector<Var> per_scale;
  for (std::size_t delta : scales) {
    const auto centres = stencil_centres(clip, delta, valid);
    if (centres.empty()) continue;
    Var st;
    stencil_sq(J, centres, &st);
    PosList at;
    for (const Centre& c : centres) at.emplace_back(c.row, c.t);
    Var p = frozen_probs(tape, head, gather_positions(hidden, at));
    Var f = fisher_norm_sq(tape, head, p, st);
    if (weights) {
      Tensor w(Shape{centres.size()});
      for (std::size_t i = 0; i < centres.size(); ++i) w[i] = (*weights)[centres[i].row * S + centres[i].t];
      f = f * tape.constant(std::move(w));
    }
    per_scale.push_back(ad::mean(f));
  }
  if (per_scale.empty()) return {zero_loss(tape), {"empty"}};
  Var total = per_scale[0];
  for (std::size_t i = 1; i < per_scale.size(); ++i) total = total + per_scale[i];
  return {ad::scale(total, 1.0 / static_cast<double>(per_scale.size())), {}};
}

std::string FisherJfrLoss::id() const {
  switch (opts.variant) {
    case FisherVariant::Jfr: return "fisher_jfr";
    case FisherVariant::Mstb: return "fisher_mstb";
    case FisherVariant::Local: return "fisher_local_jfr";
  }
  return "fisher_jfr";
}

LossOutput FisherJfrLoss::forward(Tape& tape, const LossInput& in) {
  if (!in.head) throw ConfigError(id() + " needs the LM head");
  const TrajectoryBatch& batch = *in.batch;
  Flags flags;

  std::vector<double> weights;
  if (opts.margin_weighting) {
    if (!batch.has_labels()) throw DataError(id() + ": margin weighting needs labels");
    const std::size_t B = batch.B(), S = batch.S(), D = batch.D();
    Var z = tape.stop_gradient(head_logits(tape, *in.head, ad::reshape(in.hidden, Shape{B * S, D})));
    const auto labels = next_token_labels(batch);
    MarginWeights mw = margin_weights(z.value(), labels, opts.margin);
    if (mw.empty) flags.insert("margin_empty");
    weights = std::move(mw.w);
  }
  const std::vector<double>* wp = opts.margin_weighting ? &weights : nullptr;

  LossOutput o;
  switch (opts.variant) {
    case FisherVariant::Jfr:
      o = fisher_stencil_loss(tape, batch_residual(in.hidden), in.hidden, *in.head, in.clip, {1}, nullptr, wp);
      break;
    case FisherVariant::Mstb:
      o = fisher_stencil_loss(tape, batch_residual(in.hidden), in.hidden, *in.head, in.clip, opts.scales, nullptr, wp);
      break;
    case FisherVariant::Local: {
      LocalCentroid lc = local_centroid(batch, in.clip, bank);
      Var J = local_residual(tape, in.hidden, tape.constant(lc.centroid), lc, flags);
      o = fisher_stencil_loss(tape, J, in.hidden, *in.head, in.clip, {1}, &lc.valid, wp);
      break;
    }
  }
  o.flags.insert(flags.begin(), flags.end());
  return o;
}

void FisherJfrLoss::bank_insert(const TrajectoryBatch& batch, const ClippedSpan& clip) {
  if (opts.variant == FisherVariant::Local) bank_update(bank, batch, clip);
}

// ---------------------------------------------------------------------------
// PCGrad

std::vector<double> pcgrad(std::span<const double> g_aux, std::span<const double> g_ce, double eps) {
  if (g_aux.size() != g_ce.size()) throw ShapeError("pcgrad: gradient lengths differ");
  double dot = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < g_ce.size(); ++i) {
    dot += g_aux[i] * g_ce[i];
    nn += g_ce[i] * g_ce[i];
  }
  const double c = std::min(0.0, dot / (nn + eps));
  std::vector<double> out(g_aux.begin(), g_aux.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * g_ce[i];
  return out;
}

// ---------------------------------------------------------------------------
// Decoder-visible predictor

DvJepaHead DvJepaHead::init(std::size_t D, const DvJepaOptions& o, std::uint64_t seed) {
  if (o.horizons.empty()) throw ConfigError("dv_jepa needs at least one horizon");
  for (std::size_t k : o.horizons) {
    if (k < 2) throw ConfigError("dv_jepa horizons start at 2; k = 1 is next-token CE");
  }
  Rng rng(Rng::mix(seed, 0xdf1));
  DvJepaHead h;
  h.horizons = o.horizons;
  h.mlp = make_mlp({D, o.width, D}, rng, true);
  h.emb = Tensor(Shape{o.horizons.size(), D}, rng.normal_vector(o.horizons.size() * D, 0.02));
  return h;
}

std::vector<ParamRef> DvJepaHead::parameters(const std::string& prefix) {
  std::vector<ParamRef> out;
  collect_params(mlp, prefix + ".mlp", false, out);
  out.push_back({prefix + ".emb", &emb, false});
  return out;
}

Var dv_predict(Tape& tape, const DvJepaHead& head, Var h, std::size_t slot, const std::string& prefix) {
  Var E = tape.param(prefix + ".emb", head.emb);
  const std::size_t idx[] = {slot};
  Var e = ad::take_rows(E, idx);
  return h + apply(tape, head.mlp, h + e, prefix + ".mlp");
}

Var kl_rows(Tape& tape, Var p, Var logits, double tau) {
  const Tensor& pv = p.value();
  const std::size_t N = pv.dim(0), V = pv.dim(1);
  Tensor neg_ent(Shape{N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t v = 0; v < V; ++v) {
      const double x = pv[i * V + v];
      if (x > 0.0) neg_ent[i] += x * std::log(x);
    }
  return tape.constant(std::move(neg_ent)) - ad::sum(p * ad::log_softmax(logits, -1, tau), -1);
}

LossOutput dv_margin_hinge(Tape& tape, Var logits, std::span<const int> labels, double m) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("dv_margin_hinge: logits and labels disagree");
  const std::size_t V = s[1];
  if (V < 2) throw ShapeError("dv_margin_hinge: need at least two classes");
  std::vector<std::size_t> rows, gold;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= V) throw DataError("label out of vocabulary");
    gold.push_back(rows.size() * V + static_cast<std::size_t>(labels[i]));
    rows.push_back(i);
  }
  if (rows.empty()) return {zero_loss(tape), {"empty"}};
  const std::size_t N = rows.size();
  Var z = ad::take_rows(logits, rows);
  Var zy = ad::take_rows(ad::reshape(z, Shape{N * V}), gold);
  Tensor mask(Shape{N, V});
  for (std::size_t i = 0; i < N; ++i) mask[gold[i]] = -1e30;
  Var other = ad::max(z + tape.constant(std::move(mask)), -1);
  return {ad::mean(ad::relu((m - zy) + other)), {}};
}

DvJepaLoss::DvJepaLoss(std::size_t D, DvJepaOptions o, std::uint64_t seed)
    : head(DvJepaHead::init(D, o, seed)), opts(std::move(o)) {
  if (!(opts.tau_kl > 0.0)) throw ConfigError("dv_jepa temperature must be positive");
  if (!(opts.beta >= 0.0)) throw ConfigError("dv_jepa hinge weight must be non-negative");
}

LossOutput DvJepaLoss::kl_term(Tape& tape, const LossInput& in) {
  const TrajectoryBatch& batch = *in.batch;
  std::vector<Var> per_k;
  for (std::size_t slot = 0; slot < head.horizons.size(); ++slot) {
    const std::size_t k = head.horizons[slot];
    PosList src, dst;
    for (std::size_t b = 0; b < in.clip.ranges.size(); ++b) {
      if (!in.clip.kept(b)) continue;
      const Span r = in.clip.ranges[b];
      for (std::size_t t = r.lo; t < r.hi && t + k < batch.spans[b].hi; ++t) {
        src.emplace_back(b, t);
        dst.emplace_back(b, t + k);
      }
    }
    if (src.empty()) continue;
    Var p = frozen_probs(tape, *in.head, gather_positions(in.hidden, dst), opts.tau_kl);
    Var q = dv_predict(tape, head, gather_positions(in.hidden, src), slot, "dv_jepa");
    per_k.push_back(ad::mean(kl_rows(tape, p, head_logits(tape, *in.head, q), opts.tau_kl)));
  }
  if (per_k.empty()) return {zero_loss(tape), {"empty"}};
  Var total = per_k[0];
  for (std::size_t i = 1; i < per_k.size(); ++i) total = total + per_k[i];
  return {ad::scale(total, 1.0 / static_cast<double>(per_k.size())), {}};
}

LossOutput DvJepaLoss::hinge_term(Tape& tape, const LossInput& in) {
  const TrajectoryBatch& batch = *in.batch;
  if (!batch.has_labels()) return {zero_loss(tape), {"empty"}};
  const std::size_t S = batch.S();
  const auto next = next_token_labels(batch);
  PosList at;
  std::vector<int> labels;
  for (std::size_t b = 0; b < batch.B(); ++b)
    for (std::size_t t = 0; t < S; ++t) {
      if (next[b * S + t] == kIgnoreLabel) continue;
      at.emplace_back(b, t);
      labels.push_back(next[b * S + t]);
    }
  if (at.empty()) return {zero_loss(tape), {"empty"}};
  return dv_margin_hinge(tape, head_logits(tape, *in.head, gather_positions(in.hidden, at)), labels, opts.margin);
}

LossOutput DvJepaLoss::forward(Tape& tape, const LossInput& in) {
  if (!in.head) throw ConfigError("dv_jepa needs the LM head");
  LossOutput kl = kl_term(tape, in);
  if (opts.beta == 0.0) return kl;
  LossOutput hinge = hinge_term(tape, in);
  const bool kl_empty = kl.flags.count("empty") > 0, hinge_empty = hinge.flags.count("empty") > 0;
  if (kl_empty && hinge_empty) return {zero_loss(tape), {"empty"}};
  Flags flags;
  if (kl_empty) flags.insert("kl_empty");
  if (hinge_empty) flags.insert("hinge_empty");
  return {kl.value + opts.beta * hinge.value, flags};
}

// ---------------------------------------------------------------------------
// Local KL calibration

std::vector<KlRatio> fisher_kl_check(const ToyLMHead& head, std::span<const double> h, std::span<const double> v,
                                     std::span<const double> scales) {
  const auto p = softmax_vec(logits_of(head, h));
  std::vector<KlRatio> out;
  std::vector<double> hs(h.size()), sv(v.size());
  for (double s : scales) {
    for (std::size_t i = 0; i < h.size(); ++i) {
      sv[i] = s * v[i];
      hs[i] = h[i] + sv[i];
    }
    const auto q = softmax_vec(logits_of(head, hs));
    double kl = 0.0;
    for (std::size_t y = 0; y < p.size(); ++y)
      if (p[y] > 0.0) kl += p[y] * (std::log(p[y]) - std::log(q[y]));
    KlRatio r;
    r.s = s;
    r.kl2 = 2.0 * kl;
    r.fisher = fisher_norm_sq(head, h, sv);
    // both sides vanish for v in the kernel of W
    if (r.fisher < 1e-24) {
      r.degenerate = true;
      r.ratio = std::numeric_limits<double>::quiet_NaN();
    } else {
      r.ratio = r.kl2 / r.fisher;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace trajaux
