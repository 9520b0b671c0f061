#include "trajaux/traj_losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trajaux/error.hpp"

namespace trajaux {

namespace {

constexpr double kTinyNorm = 1e-12;

using PosList = std::vector<std::pair<std::size_t, std::size_t>>;

}  // namespace

Var gather_positions(Var hidden, const PosList& bt) {
  const std::size_t S = hidden.shape().at(1);
  std::vector<std::size_t> idx;
  idx.reserve(bt.size());
  for (const auto& [b, t] : bt) idx.push_back(b * S + t);
  return ad::take_rows(hidden, idx);
}

Var zero_loss(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

// ---------------------------------------------------------------------------
// STP and T1

namespace {

// Gathers the four taps of every draw.
std::array<Var, 4> taps(Var hidden, const std::vector<IndexDraw<4>>& draws) {
  std::array<Var, 4> out;
  for (std::size_t k = 0; k < 4; ++k) {
    PosList bt;
    for (const auto& d : draws) bt.emplace_back(d.row, d.idx[k]);
    out[k] = gather_positions(hidden, bt);
  }
  return out;
}

}  // namespace

LossOutput stp_on_draws(Tape& tape, Var hidden, const std::vector<IndexDraw<4>>& draws) {
  std::vector<IndexDraw<4>> used;
  const Tensor& h = hidden.value();
  const std::size_t S = h.dim(1), D = h.dim(2);
  for (const auto& d : draws) {
    double nu = 0.0, nv = 0.0;
    for (std::size_t k = 0; k < D; ++k) {
      const double u = h[(d.row * S + d.idx[1]) * D + k] - h[(d.row * S + d.idx[0]) * D + k];
      const double v = h[(d.row * S + d.idx[3]) * D + k] - h[(d.row * S + d.idx[2]) * D + k];
      nu += u * u;
      nv += v * v;
    }
    if (std::sqrt(nu) > kTinyNorm && std::sqrt(nv) > kTinyNorm) used.push_back(d);
  }
  if (used.empty()) return {zero_loss(tape), {"empty"}};
  auto [h1, h2, h3, h4] = taps(hidden, used);
  Var cos = ad::cosine(h2 - h1, h4 - h3);
  return {ad::mean(1.0 - cos), {}};
}

LossOutput ctube_on_draws(Tape& tape, Var hidden, const std::vector<IndexDraw<4>>& draws) {
  std::vector<IndexDraw<4>> used;
  const Tensor& h = hidden.value();
  const std::size_t S = h.dim(1), D = h.dim(2);
  for (const auto& d : draws) {
    double n = 0.0;
    for (std::size_t k = 0; k < D; ++k) {
      const double c = h[(d.row * S + d.idx[3]) * D + k] - h[(d.row * S + d.idx[0]) * D + k];
      n += c * c;
    }
    if (std::sqrt(n) > kTinyNorm) used.push_back(d);
  }
  if (used.empty()) return {zero_loss(tape), {"empty"}};
  auto [hs, hp, hq, ht] = taps(hidden, used);
  Var d2 = 0.5 * ((hq - hp) - (hp - hs)) + 0.5 * ((ht - hq) - (hq - hp));
  Var chord = ht - hs;
  const std::size_t N = used.size();
  Var coef = ad::reshape(ad::dot(d2, chord) / ad::dot(chord, chord), Shape{N, 1});
  Var kappa = d2 - coef * chord;
  return {ad::mean(ad::dot(kappa, kappa)), {}};
}

LossOutput StpLoss::forward(Tape& tape, const LossInput& in) {
  Rng rng(Rng::mix(in.seed, 0x57b));
  return stp_on_draws(tape, in.hidden, draw_indices<4>(in.clip, rng));
}

LossOutput CtubeLoss::forward(Tape& tape, const LossInput& in) {
  Rng rng(Rng::mix(in.seed, 0xc7b));
  return ctube_on_draws(tape, in.hidden, draw_indices<4>(in.clip, rng));
}

// ---------------------------------------------------------------------------
// T2

MetricHead MetricHead::init(std::size_t D, std::size_t rank, std::size_t width, double log_diag_init,
                            std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x219));
  MetricHead m;
  m.D = D;
  m.rank = rank;
  m.hidden_layer = make_linear(D, width, rng);
  m.u_out = make_linear(width, D * rank, rng, true, true);
  m.d_out = make_linear(width, D, rng);
  for (double& b : m.d_out.b.data()) b = log_diag_init;
  return m;
}

std::vector<ParamRef> MetricHead::parameters(const std::string& prefix) {
  std::vector<ParamRef> out;
  collect_params(hidden_layer, prefix + ".hidden", false, out);
  collect_params(u_out, prefix + ".u", false, out);
  collect_params(d_out, prefix + ".d", false, out);
  return out;
}

Var metric_inner(Tape& tape, const MetricHead& head, Var at, Var x, Var y, const std::string& prefix) {
  const std::size_t N = at.shape().at(0), D = head.D, r = head.rank;
  Var z = ad::gelu(apply(tape, head.hidden_layer, at, prefix + ".hidden"));
  Var U = ad::reshape(apply(tape, head.u_out, z, prefix + ".u"), Shape{N, D, r});
  Var e = ad::exp(apply(tape, head.d_out, z, prefix + ".d"));
  Var ux = ad::sum(U * ad::reshape(x, Shape{N, D, 1}), 1);
  Var uy = ad::sum(U * ad::reshape(y, Shape{N, D, 1}), 1);
  return (ad::dot(x, y) + ad::dot(ux, uy)) + ad::sum(e * x * y, -1);
}

RigLoss::RigLoss(std::size_t D, RigOptions o, std::uint64_t seed)
    : head(MetricHead::init(D, o.rank, o.width, o.log_diag_init, seed)), opts(o) {}

std::vector<ParamRef> RigLoss::parameters() {
  if (opts.euclidean) return {};
  return head.parameters("rig");
}

LossOutput RigLoss::forward(Tape& tape, const LossInput& in) {
  Rng rng(Rng::mix(in.seed, 0x219));
  const auto draws = draw_indices<3>(in.clip, rng);
  const Tensor& h = in.hidden.value();
  const std::size_t S = h.dim(1);
  PosList ps, pr, pt;
  for (const auto& d : draws) {
    ps.emplace_back(d.row, d.idx[0]);
    pr.emplace_back(d.row, d.idx[1]);
    pt.emplace_back(d.row, d.idx[2]);
  }
  // Drop rows with a vanishing velocity.
  {
    PosList s2, r2, t2;
    const std::size_t D = h.dim(2);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double hs = h[(ps[i].first * S + ps[i].second) * D + k];
        const double hr = h[(pr[i].first * S + pr[i].second) * D + k];
        const double ht = h[(pt[i].first * S + pt[i].second) * D + k];
        na += (ht - hr) * (ht - hr);
        nb += (hr - hs) * (hr - hs);
      }
      if (std::sqrt(na) > kTinyNorm && std::sqrt(nb) > kTinyNorm) {
        s2.push_back(ps[i]);
        r2.push_back(pr[i]);
        t2.push_back(pt[i]);
      }
    }
    ps.swap(s2);
    pr.swap(r2);
    pt.swap(t2);
  }
  if (ps.empty()) return {zero_loss(tape), {"empty"}};
  Var hs = gather_positions(in.hidden, ps);
  Var hr = gather_positions(in.hidden, pr);
  Var ht = gather_positions(in.hidden, pt);
  Var a = ht - hr;
  Var b = hr - hs;
  Var cos;
  if (opts.euclidean) {
    cos = ad::cosine(a, b);
  } else {
    Var ab = metric_inner(tape, head, hr, a, b, "rig");
    Var aa = metric_inner(tape, head, hr, a, a, "rig");
    Var bb = metric_inner(tape, head, hr, b, b, "rig");
    cos = ab / (ad::sqrt(aa) * ad::sqrt(bb));
  }
  return {ad::mean(1.0 - cos), {}};
}

// ---------------------------------------------------------------------------
// JFR family

std::vector<Centre> stencil_centres(const ClippedSpan& clip, std::size_t delta,
                                    const std::vector<std::vector<bool>>* valid) {
  std::vector<Centre> out;
  if (delta == 0) throw ConfigError("stencil scale must be positive");
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    if (!clip.kept(b)) continue;
    const Span r = clip.ranges[b];
    if (r.length() < 2 * delta + 1) continue;
    for (std::size_t t = r.lo + delta; t + delta < r.hi; ++t) {
      if (valid) {
        const auto& v = (*valid)[b];
        if (!(v[t - delta] && v[t] && v[t + delta])) continue;
      }
      out.push_back(Centre{b, t, delta});
    }
  }
  return out;
}

Var stencil_sq(Var J, const std::vector<Centre>& centres, Var* stencil) {
  PosList pm, pc, pp;
  std::vector<double> inv;
  for (const Centre& c : centres) {
    pm.emplace_back(c.row, c.t - c.delta);
    pc.emplace_back(c.row, c.t);
    pp.emplace_back(c.row, c.t + c.delta);
    inv.push_back(1.0 / static_cast<double>(c.delta * c.delta));
  }
  Var jm = gather_positions(J, pm);
  Var jc = gather_positions(J, pc);
  Var jp = gather_positions(J, pp);
  Var scale = J.tape().constant(Tensor(Shape{centres.size(), 1}, std::move(inv)));
  Var st = ((jp - 2.0 * jc) + jm) * scale;
  if (stencil) *stencil = st;
  return ad::dot(st, st);
}

LossOutput multiscale_stencil_loss(Tape& tape, Var J, const ClippedSpan& clip,
                                   const std::vector<std::size_t>& scales,
                                   const std::vector<std::vector<bool>>* valid) {
  std::vector<Var> per_scale;
  for (std::size_t delta : scales) {
    const auto centres = stencil_centres(clip, delta, valid);
    if (centres.empty()) continue;
    per_scale.push_back(ad::mean(stencil_sq(J, centres)));
  }
  if (per_scale.empty()) return {zero_loss(tape), {"empty"}};
  Var total = per_scale[0];
  for (std::size_t i = 1; i < per_scale.size(); ++i) total = total + per_scale[i];
  return {ad::scale(total, 1.0 / static_cast<double>(per_scale.size())), {}};
}

Var batch_residual(Var hidden) { return hidden - ad::mean(hidden, 0, true); }

LossOutput JfrLoss::forward(Tape& tape, const LossInput& in) {
  return multiscale_stencil_loss(tape, batch_residual(in.hidden), in.clip, {1});
}

LossOutput MstbJfrLoss::forward(Tape& tape, const LossInput& in) {
  Var J = raw ? in.hidden : batch_residual(in.hidden);
  return multiscale_stencil_loss(tape, J, in.clip, scales);
}

LossOutput DstJfrLoss::forward(Tape& tape, const LossInput& in) {
  if (layers.empty()) throw ConfigError("dst_jfr needs at least one layer");
  std::vector<Var> per_layer;
  Flags flags;
  for (int layer : layers) {
    Var H;
    if (layer == final_layer) {
      H = in.hidden;
    } else {
      auto it = in.layers.find(layer);
      if (it == in.layers.end()) {
        throw DataError("dst_jfr: layer " + std::to_string(layer) + " missing from layer stack");
      }
      H = it->second;
    }
    LossOutput o = multiscale_stencil_loss(tape, batch_residual(H), in.clip, {1});
    if (o.flags.count("empty")) return o;
    per_layer.push_back(o.value);
  }
  Var total = per_layer[0];
  for (std::size_t i = 1; i < per_layer.size(); ++i) total = total + per_layer[i];
  return {ad::scale(total, 1.0 / static_cast<double>(per_layer.size())), flags};
}

// ---------------------------------------------------------------------------
// T3-Local

void MemoryBank::insert(BankEntry e) {
  if (capacity_ == 0) return;
  entries_.push_back(std::move(e));
  while (entries_.size() > capacity_) entries_.pop_front();
}

std::vector<MemoryBank::Neighbour> MemoryBank::retrieve(std::span<const double> anchor) const {
  std::vector<Neighbour> all;
  double na = 0.0;
  for (double x : anchor) na += x * x;
  na = std::sqrt(na);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i].anchor;
    if (a.size() != anchor.size()) throw ShapeError("bank anchor width mismatch");
    double dot = 0.0, nb = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
      dot += anchor[d] * a[d];
      nb += a[d] * a[d];
    }
    const double denom = na * std::sqrt(nb);
    all.push_back({i, denom > 0.0 ? dot / denom : 0.0, 0.0});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Neighbour& x, const Neighbour& y) { return x.cosine > y.cosine; });
  all.resize(std::min(all.size(), k_));
  if (all.empty()) return all;
  double m = -INFINITY;
  for (const auto& n : all) m = std::max(m, n.cosine / tau_);
  double z = 0.0;
  for (auto& n : all) {
    n.weight = std::exp(n.cosine / tau_ - m);
    z += n.weight;
  }
  for (auto& n : all) n.weight /= z;
  return all;
}

std::vector<double> row_anchor(const TrajectoryBatch& batch, const ClippedSpan& clip, std::size_t b) {
  Span src;
  if (!batch.prompt_spans.empty() && batch.prompt_spans[b].length() > 0) {
    src = batch.prompt_spans[b];
  } else if (batch.spans[b].lo > 0) {
    src = Span{0, batch.spans[b].lo};
  } else if (clip.ranges[b].length() > 0) {
    src = clip.ranges[b];
  } else {
    src = batch.spans[b];
  }
  const std::size_t D = batch.D();
  std::vector<double> a(D, 0.0);
  for (std::size_t t = src.lo; t < src.hi; ++t)
    for (std::size_t d = 0; d < D; ++d) a[d] += batch.hidden.at(b, t, d);
  for (double& x : a) x /= static_cast<double>(src.length());
  return a;
}

LocalCentroid local_centroid(const TrajectoryBatch& batch, const ClippedSpan& clip,
                             const MemoryBank& bank) {
  const std::size_t B = batch.B(), S = batch.S(), D = batch.D();
  LocalCentroid lc;
  lc.centroid = Tensor(Shape{B, S, D});
  lc.valid.assign(B, std::vector<bool>(S, false));
  lc.fallback.assign(B, false);
  std::vector<double> acc(D);
  for (std::size_t b = 0; b < B; ++b) {
    if (!clip.kept(b)) continue;
    if (bank.size() == 0) {
      lc.fallback[b] = true;
      std::fill(lc.valid[b].begin(), lc.valid[b].end(), true);
      continue;
    }
    const auto nbrs = bank.retrieve(row_anchor(batch, clip, b));
    const Span r = clip.ranges[b];
    for (std::size_t rel = 0; rel < r.length(); ++rel) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double wsum = 0.0;
      for (const auto& n : nbrs) {
        const Tensor& H = bank.entries()[n.index].trajectory;
        if (H.dim(0) <= rel) continue;
        for (std::size_t d = 0; d < D; ++d) acc[d] += n.weight * H.at(rel, d);
        wsum += n.weight;
      }
      if (wsum <= 0.0) continue;
      const std::size_t t = r.lo + rel;
      for (std::size_t d = 0; d < D; ++d) lc.centroid.at(b, t, d) = acc[d] / wsum;
      lc.valid[b][t] = true;
    }
  }
  return lc;
}

Var local_residual(Tape& tape, Var hidden, Var centroid, const LocalCentroid& lc, Flags& flags) {
  Var target = tape.stop_gradient(centroid);
  const bool any_fallback = std::find(lc.fallback.begin(), lc.fallback.end(), true) != lc.fallback.end();
  if (!any_fallback) return hidden - target;
  const std::size_t B = hidden.shape()[0];
  Tensor mb(Shape{B, 1, 1}), mf(Shape{B, 1, 1});
  for (std::size_t b = 0; b < B; ++b) (lc.fallback[b] ? mf : mb)[b] = 1.0;
  flags.insert("fallback");
  return (hidden - target * tape.constant(mb)) - ad::mean(hidden, 0, true) * tape.constant(mf);
}

LossOutput local_jfr_on_centroid(Tape& tape, Var hidden, Var centroid, const LocalCentroid& lc,
                                 const ClippedSpan& clip) {
  Flags flags;
  Var J = local_residual(tape, hidden, centroid, lc, flags);
  LossOutput o = multiscale_stencil_loss(tape, J, clip, {1}, &lc.valid);
  o.flags.insert(flags.begin(), flags.end());
  return o;
}

LossOutput LocalJfrLoss::forward(Tape& tape, const LossInput& in) {
  LocalCentroid lc = local_centroid(*in.batch, in.clip, bank);
  Var c = tape.constant(lc.centroid);
  return local_jfr_on_centroid(tape, in.hidden, c, lc, in.clip);
}

void bank_update(MemoryBank& bank, const TrajectoryBatch& batch, const ClippedSpan& clip) {
  const std::size_t D = batch.D();
  for (std::size_t b = 0; b < batch.B(); ++b) {
    if (!clip.kept(b)) continue;
    const Span r = clip.ranges[b];
    Tensor traj(Shape{r.length(), D});
    for (std::size_t t = r.lo; t < r.hi; ++t)
      for (std::size_t d = 0; d < D; ++d) traj.at(t - r.lo, d) = batch.hidden.at(b, t, d);
    bank.insert(BankEntry{row_anchor(batch, clip, b), std::move(traj)});
  }
}

void LocalJfrLoss::bank_insert(const TrajectoryBatch& batch, const ClippedSpan& clip) {
  bank_update(bank, batch, clip);
}

// ---------------------------------------------------------------------------
// T7

Var l2_normalize_rows(Var z) {
  const std::size_t N = z.shape().at(0);
  return z / ad::reshape(ad::norm(z), Shape{N, 1});
}

Var diagonal_ce(Var logits) {
  const std::size_t N = logits.shape().at(0);
  if (logits.shape().size() != 2 || logits.shape()[1] != N) {
    throw ShapeError("diagonal_ce: expected a square matrix, got " + shape_str(logits.shape()));
  }
  Var ls = ad::reshape(ad::log_softmax(logits, -1), Shape{N * N});
  std::vector<std::size_t> diag(N);
  for (std::size_t i = 0; i < N; ++i) diag[i] = i * N + i;
  return -ad::mean(ad::take_rows(ls, diag));
}

Var symmetric_info_nce(Var za, Var zb, double tau) {
  Var logits = ad::matmul(za, ad::transpose(zb)) * (1.0 / tau);
  return 0.5 * (diagonal_ce(logits) + diagonal_ce(ad::transpose(logits)));
}

Var pool_groups(Tape& tape, Var hidden, const std::vector<PosList>& groups) {
  const Shape& s = hidden.shape();
  const std::size_t B = s.at(0), S = s.at(1), D = s.at(2);
  Tensor m(Shape{groups.size(), B * S});
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw Error("pool_groups: empty group");
    const double w = 1.0 / static_cast<double>(groups[g].size());
    for (const auto& [b, t] : groups[g]) m.at(g, b * S + t) += w;
  }
  return ad::matmul(tape.constant(std::move(m)), ad::reshape(hidden, Shape{B * S, D}));
}

Halves span_halves(const ClippedSpan& clip) {
  Halves h;
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    const Span r = clip.ranges[b];
    if (!clip.kept(b) || r.length() < 2) continue;
    const std::size_t mid = r.lo + r.length() / 2;
    PosList a, bb;
    for (std::size_t t = r.lo; t < mid; ++t) a.emplace_back(b, t);
    for (std::size_t t = mid; t < r.hi; ++t) bb.emplace_back(b, t);
    h.rows.push_back(b);
    h.a.push_back(std::move(a));
    h.b.push_back(std::move(bb));
  }
  return h;
}

ContrastiveLoss::ContrastiveLoss(std::size_t D, std::size_t P, double tau, std::uint64_t seed)
    : tau(tau) {
  Rng rng(Rng::mix(seed, 0x77));
  proj = make_mlp({D, D, P}, rng);
}

std::vector<ParamRef> ContrastiveLoss::parameters() {
  std::vector<ParamRef> out;
  collect_params(proj, "contrastive.proj", false, out);
  return out;
}

LossOutput ContrastiveLoss::forward(Tape& tape, const LossInput& in) {
  const Halves h = span_halves(in.clip);
  if (h.rows.size() < 2) return {zero_loss(tape), {"empty"}};
  Var za = l2_normalize_rows(apply(tape, proj, pool_groups(tape, in.hidden, h.a), "contrastive.proj"));
  Var zb = l2_normalize_rows(apply(tape, proj, pool_groups(tape, in.hidden, h.b), "contrastive.proj"));
  return {symmetric_info_nce(za, zb, tau), {}};
}

// ---------------------------------------------------------------------------
// T9

TubeProjector::TubeProjector(double eps, std::size_t history, ShrinkProfile profile)
    : eps(eps), k(history), profile(profile) {
  if (!(eps > 0.0)) throw ConfigError("tube radius must be positive");
  if (history < 2) throw ConfigError("tangent history needs at least two states");
}

double TubeProjector::alpha(double r) const {
  if (profile == ShrinkProfile::HardClip) return r <= 1.0 ? 1.0 : 1.0 / r;
  return r == 0.0 ? 1.0 : std::tanh(r) / r;
}

std::vector<double> TubeProjector::tangent() const {
  if (history.size() < 2) return {};
  const std::size_t D = history.back().size();
  std::vector<double> t(D, 0.0);
  for (std::size_t i = 1; i < history.size(); ++i)
    for (std::size_t d = 0; d < D; ++d) t[d] += history[i][d] - history[i - 1][d];
  double n = 0.0;
  for (double x : t) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0)) return {};
  for (double& x : t) x /= n;
  return t;
}

std::vector<double> TubeProjector::project_frozen(std::span<const double> h_raw) const {
  std::vector<double> out(h_raw.begin(), h_raw.end());
  if (history.empty()) return out;
  const auto& prev = history.back();
  if (prev.size() != h_raw.size()) throw ShapeError("tube projector: width changed");
  const auto tan = tangent();
  if (tan.empty()) return out;
  const std::size_t D = h_raw.size();
  std::vector<double> v(D);
  double along = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    v[d] = h_raw[d] - prev[d];
    along += v[d] * tan[d];
  }
  std::vector<double> perp(D);
  double np = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    perp[d] = v[d] - along * tan[d];
    np += perp[d] * perp[d];
  }
  np = std::sqrt(np);
  double a = alpha(np / eps);
  if (a == 1.0) return out;
  if (profile == ShrinkProfile::HardClip) {
    // eps / np can round up by an ulp; step down until the scaled norm fits
    auto scaled = [&] {
      double s = 0.0;
      for (double x : perp) s += (a * x) * (a * x);
      return std::sqrt(s);
    };
    while (scaled() > eps) a = std::nextafter(a, 0.0);
  }
  for (std::size_t d = 0; d < D; ++d) out[d] = prev[d] + along * tan[d] + a * perp[d];
  return out;
}

std::vector<double> TubeProjector::project(std::span<const double> h_raw) {
  std::vector<double> out = project_frozen(h_raw);
  history.push_back(out);
  while (history.size() > k) history.pop_front();
  return out;
}

}  // namespace trajaux
