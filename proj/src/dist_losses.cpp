#include "trajaux/dist_losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/normal.hpp>

#include "trajaux/error.hpp"

namespace trajaux {

namespace {

constexpr double kTinyNorm = 1e-12;

using PosList = std::vector<std::pair<std::size_t, std::size_t>>;

inline double kern(double z) { return std::exp(-0.25 * z * z); }
// dK/dz, odd in z
inline double kern_d(double z) { return -0.5 * z * std::exp(-0.25 * z * z); }

// sum_ij K(a_i - b_j) over column m of row-major a (n x M) and b (k x M).
double pair_sum(const Tensor& a, const Tensor& b, std::size_t m, std::size_t M) {
  const std::size_t n = a.size() / M, k = b.size() / M;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ai = a[i * M + m];
    for (std::size_t j = 0; j < k; ++j) s += kern(ai - b[j * M + m]);
  }
  return s;
}

// g[i] += c * sum_j K'(a_i - b_j) for column m.
void pair_grad(const Tensor& a, const Tensor& b, std::size_t m, std::size_t M, double c, Tensor& g) {
  const std::size_t n = a.size() / M, k = b.size() / M;
  for (std::size_t i = 0; i < n; ++i) {
    const double ai = a[i * M + m];
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += kern_d(ai - b[j * M + m]);
    g[i * M + m] += c * s;
  }
}

void require_matrix(Var x, const char* what) {
  if (x.shape().size() != 2) throw ShapeError(std::string(what) + ": expected N x M, got " + shape_str(x.shape()));
}

const double kSingle = 2.0 * std::sqrt(2.0 / 3.0);

Var project(Tape& tape, const Sketcher& s, Var x, const std::string& name, const Tensor& dirs) {
  Var z = sketch(tape, s, x, name);
  return ad::matmul(z, ad::transpose(tape.constant(dirs)));
}

Tensor draw_dirs(std::uint64_t seed, std::uint64_t salt, std::size_t M, std::size_t dim) {
  Rng rng(Rng::mix(seed, salt));
  return random_directions(M, dim, rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Building blocks

double epps_pulley(std::span<const double> u) {
  const std::size_t N = u.size();
  if (N == 0) throw DataError("epps_pulley: empty sample");
  double pair = 0.0, single = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    // diagonal contributes exactly N
    for (std::size_t j = i + 1; j < N; ++j) pair += kern(u[i] - u[j]);
    single += std::exp(-u[i] * u[i] / 6.0);
  }
  const double n = static_cast<double>(N);
  return (n + 2.0 * pair) / (n * n) - kSingle * single / n + std::numbers::sqrt2 / 2.0;
}

Var epps_pulley(Var u) {
  require_matrix(u, "epps_pulley");
  const Tensor& x = u.value();
  const std::size_t N = x.dim(0), M = x.dim(1);
  if (N == 0) throw DataError("epps_pulley: empty sample");
  const double n = static_cast<double>(N);
  Tensor out(Shape{M});
  for (std::size_t m = 0; m < M; ++m) {
    double single = 0.0;
    for (std::size_t i = 0; i < N; ++i) single += std::exp(-x[i * M + m] * x[i * M + m] / 6.0);
    out[m] = pair_sum(x, x, m, M) / (n * n) - kSingle * single / n + std::numbers::sqrt2 / 2.0;
  }
  Tape& tape = u.tape();
  const std::size_t uid = u.id();
  return tape.record(std::move(out), {u}, [&tape, uid, N, M, n](const Tensor& g, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const Tensor& x = tape.value_of(uid);
    Tensor d(Shape{N, M});
    for (std::size_t m = 0; m < M; ++m) {
      pair_grad(x, x, m, M, 2.0 / (n * n), d);
      for (std::size_t i = 0; i < N; ++i) {
        const double v = x[i * M + m];
        d[i * M + m] += kSingle / n * (v / 3.0) * std::exp(-v * v / 6.0);
      }
    }
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t m = 0; m < M; ++m) (*pg[0])[i * M + m] += g[m] * d[i * M + m];
  });
}

double cf_distance(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw DataError("cf_distance: empty half");
  auto mean_k = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (double ai : a)
      for (double bj : b) s += kern(ai - bj);
    return s / static_cast<double>(a.size() * b.size());
  };
  return mean_k(x, x) - 2.0 * mean_k(x, y) + mean_k(y, y);
}

Var cf_distance(Var x, Var y) {
  require_matrix(x, "cf_distance");
  require_matrix(y, "cf_distance");
  const Tensor& a = x.value();
  const Tensor& b = y.value();
  const std::size_t n = a.dim(0), k = b.dim(0), M = a.dim(1);
  if (b.dim(1) != M) throw ShapeError("cf_distance: direction counts differ");
  if (n == 0 || k == 0) throw DataError("cf_distance: empty half");
  const double nn = static_cast<double>(n), kk = static_cast<double>(k);
  Tensor out(Shape{M});
  for (std::size_t m = 0; m < M; ++m) {
    out[m] = pair_sum(a, a, m, M) / (nn * nn) - 2.0 * pair_sum(a, b, m, M) / (nn * kk) +
             pair_sum(b, b, m, M) / (kk * kk);
  }
  Tape& tape = x.tape();
  const std::size_t xid = x.id(), yid = y.id();
  return tape.record(std::move(out), {x, y},
                     [&tape, xid, yid, n, k, M, nn, kk](const Tensor& g, std::span<Tensor* const> pg) {
                       const Tensor& a = tape.value_of(xid);
                       const Tensor& b = tape.value_of(yid);
                       if (pg[0]) {
                         Tensor d(Shape{n, M});
                         for (std::size_t m = 0; m < M; ++m) {
                           pair_grad(a, a, m, M, 2.0 / (nn * nn), d);
                           pair_grad(a, b, m, M, -2.0 / (nn * kk), d);
                         }
                         for (std::size_t i = 0; i < n * M; ++i) (*pg[0])[i] += g[i % M] * d[i];
                       }
                       if (pg[1]) {
                         Tensor d(Shape{k, M});
                         for (std::size_t m = 0; m < M; ++m) {
                           pair_grad(b, b, m, M, 2.0 / (kk * kk), d);
                           pair_grad(b, a, m, M, -2.0 / (nn * kk), d);
                         }
                         for (std::size_t i = 0; i < k * M; ++i) (*pg[1])[i] += g[i % M] * d[i];
                       }
                     });
}

Tensor random_directions(std::size_t M, std::size_t dim, Rng& rng) {
  if (M == 0 || dim == 0) throw ConfigError("need at least one direction in at least one dimension");
  Tensor out(Shape{M, dim});
  for (std::size_t m = 0; m < M; ++m) {
    double n = 0.0;
    do {
      n = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        out[m * dim + j] = rng.normal();
        n += out[m * dim + j] * out[m * dim + j];
      }
    } while (n == 0.0);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < dim; ++j) out[m * dim + j] /= n;
  }
  return out;
}

Var vicreg_vc(Var z, double eps, double mu) {
  require_matrix(z, "vicreg_vc");
  const std::size_t N = z.shape()[0], d = z.shape()[1];
  if (N < 2) throw DataError("vicreg_vc: need at least two samples");
  Var c = z - ad::mean(z, 0, true);
  Var var = ad::mean(ad::square(c), 0);
  Var hinge = ad::mean(ad::relu(1.0 - ad::sqrt(var + eps)));
  if (d < 2) return hinge;
  Var C = ad::matmul(ad::transpose(c), c) * (1.0 / static_cast<double>(N));
  Tensor mask(Shape{d, d});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) mask.at(j, k) = j == k ? 0.0 : 1.0;
  Var off = ad::sum(ad::square(C) * z.tape().constant(std::move(mask))) *
            (1.0 / static_cast<double>(d * (d - 1)));
  return hinge + mu * off;
}

double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> unit;
  return boost::math::quantile(unit, p);
}

Var sw_iso(Var u) {
  require_matrix(u, "sw_iso");
  const Tensor& x = u.value();
  const std::size_t N = x.dim(0), M = x.dim(1);
  if (N == 0) throw DataError("sw_iso: empty sample");
  std::vector<std::size_t> idx;
  idx.reserve(N * M);
  std::vector<double> col(N);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t i = 0; i < N; ++i) col[i] = x[i * M + m];
    for (std::size_t i : argsort(col)) idx.push_back(i * M + m);
  }
  Tensor q(Shape{M * N});
  for (std::size_t i = 0; i < N; ++i) {
    const double qi = normal_quantile((static_cast<double>(i) + 0.5) / static_cast<double>(N));
    for (std::size_t m = 0; m < M; ++m) q[m * N + i] = qi;
  }
  Var sorted = ad::take_rows(ad::reshape(u, Shape{N * M}), idx);
  return ad::mean(ad::square(sorted - u.tape().constant(std::move(q))));
}

Var sectional_curvature(Var hidden, const std::vector<IndexDraw<3>>& triples) {
  std::array<PosList, 3> bt;
  for (const auto& d : triples)
    for (std::size_t k = 0; k < 3; ++k) bt[k].emplace_back(d.row, d.idx[k]);
  Var hs = gather_positions(hidden, bt[0]);
  Var hr = gather_positions(hidden, bt[1]);
  Var ht = gather_positions(hidden, bt[2]);
  Var off = hr - 0.5 * (hs + ht);
  Var chord = ht - hs;
  return ad::dot(off, off) / (0.25 * ad::dot(chord, chord));
}

double hutchinson_trace(const std::function<double(const std::vector<double>&)>& quad, std::size_t dim,
                        std::size_t probes, Rng& rng) {
  if (probes == 0) throw ConfigError("hutchinson_trace: need at least one probe");
  std::vector<double> v(dim);
  double s = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    for (double& x : v) x = rng.rademacher();
    s += quad(v);
  }
  return s / static_cast<double>(probes);
}

std::vector<double> sinusoidal_posemb(std::size_t t, std::size_t dim) {
  std::vector<double> pe(dim);
  const double tt = static_cast<double>(t);
  for (std::size_t i = 0; i < dim; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
    pe[i] = std::sin(tt * freq);
    if (i + 1 < dim) pe[i + 1] = std::cos(tt * freq);
  }
  return pe;
}

PosList pooled_positions(const ClippedSpan& clip) {
  PosList out;
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    if (!clip.kept(b)) continue;
    for (std::size_t t = clip.ranges[b].lo; t < clip.ranges[b].hi; ++t) out.emplace_back(b, t);
  }
  return out;
}

Var unit_tangents(Var hidden, const ClippedSpan& clip, PosList* starts) {
  const Tensor& h = hidden.value();
  const std::size_t S = h.dim(1), D = h.dim(2);
  PosList from, to;
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    if (!clip.kept(b)) continue;
    const Span r = clip.ranges[b];
    for (std::size_t t = r.lo; t + 1 < r.hi; ++t) {
      double n = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double x = h[(b * S + t + 1) * D + d] - h[(b * S + t) * D + d];
        n += x * x;
      }
      if (std::sqrt(n) < kTinyNorm) continue;
      from.emplace_back(b, t);
      to.emplace_back(b, t + 1);
    }
  }
  if (starts) *starts = from;
  if (from.empty()) return {};
  return l2_normalize_rows(gather_positions(hidden, to) - gather_positions(hidden, from));
}

// ---------------------------------------------------------------------------
// Tier 1

SigregStateLoss::SigregStateLoss(std::size_t D, SketchedOptions o, std::uint64_t seed)
    : sketcher(make_sketcher(o.dprime, D, SketchInit::SmallGaussian, false, Rng::mix(seed, 0xd1))), opts(o) {}

std::vector<ParamRef> SigregStateLoss::parameters() {
  return {{"sigreg_state.sketch", &sketcher.P, false}};
}

LossOutput SigregStateLoss::forward(Tape& tape, const LossInput& in) {
  const PosList pos = pooled_positions(in.clip);
  if (pos.empty()) return {zero_loss(tape), {"empty"}};
  const Tensor dirs = draw_dirs(in.seed, 0xd1, opts.directions, opts.dprime);
  Var u = project(tape, sketcher, gather_positions(in.hidden, pos), "sigreg_state.sketch", dirs);
  return {ad::mean(epps_pulley(u)), {}};
}

SigregTangentLoss::SigregTangentLoss(std::size_t D, SketchedOptions o, std::uint64_t seed)
    : sketcher(make_sketcher(o.dprime, D, SketchInit::SmallGaussian, false, Rng::mix(seed, 0xd2))), opts(o) {}

std::vector<ParamRef> SigregTangentLoss::parameters() {
  return {{"sigreg_tangent.sketch", &sketcher.P, false}};
}

LossOutput SigregTangentLoss::forward(Tape& tape, const LossInput& in) {
  Var tan = unit_tangents(in.hidden, in.clip);
  if (!tan.valid()) return {zero_loss(tape), {"empty"}};
  const Tensor dirs = draw_dirs(in.seed, 0xd2, opts.directions, opts.dprime);
  Var u = project(tape, sketcher, tan, "sigreg_tangent.sketch", dirs);
  return {ad::mean(epps_pulley(u)), {}};
}

std::vector<IndexDraw<3>> draw_symmetric_triples(const ClippedSpan& clip, std::size_t per_row, Rng& rng) {
  std::vector<IndexDraw<3>> out;
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    const Span r = clip.ranges[b];
    if (!clip.kept(b) || r.length() < 3) continue;
    std::vector<std::pair<std::size_t, std::size_t>> centre_step;
    for (std::size_t c = r.lo + 1; c + 1 < r.hi; ++c) {
      const std::size_t reach = std::min(c - r.lo, r.hi - 1 - c);
      for (std::size_t d = 1; d <= reach; ++d) centre_step.emplace_back(c, d);
    }
    const std::size_t k = std::min(per_row, centre_step.size());
    for (std::size_t i : rng.sorted_sample(0, centre_step.size(), k)) {
      const auto [c, d] = centre_step[i];
      out.push_back({b, {c - d, c, c + d}});
    }
  }
  return out;
}

LossOutput SectionalLoss::forward(Tape& tape, const LossInput& in) {
  Rng rng(Rng::mix(in.seed, 0xd3));
  const auto drawn = draw_symmetric_triples(in.clip, per_row, rng);
  const Tensor& h = in.hidden.value();
  const std::size_t S = h.dim(1), D = h.dim(2);
  std::vector<IndexDraw<3>> used;
  for (const auto& tr : drawn) {
    double n = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double c = h[(tr.row * S + tr.idx[2]) * D + d] - h[(tr.row * S + tr.idx[0]) * D + d];
      n += c * c;
    }
    if (std::sqrt(n) >= kTinyNorm) used.push_back(tr);
  }
  if (used.empty()) return {zero_loss(tape), {"empty"}};
  Var k = sectional_curvature(in.hidden, used);
  return {ad::mean(ad::square(k - ad::mean(k))), {}};
}

StpCmfLoss::StpCmfLoss(std::size_t D, SketchedOptions o, std::uint64_t seed)
    : sketcher(make_sketcher(o.dprime, D, SketchInit::Xavier, true, Rng::mix(seed, 0xd4))), opts(o) {}

std::vector<ParamRef> StpCmfLoss::parameters() { return {{"stp_cmf.sketch", &sketcher.P, true}}; }

LossOutput StpCmfLoss::forward(Tape& tape, const LossInput& in) {
  PosList starts;
  Var tan = unit_tangents(in.hidden, in.clip, &starts);
  if (!tan.valid()) return {zero_loss(tape), {"empty"}};
  const Tensor dirs = draw_dirs(in.seed, 0xd4, opts.directions, opts.dprime);
  Var u = project(tape, sketcher, tan, "stp_cmf.sketch", dirs);

  // step t -> t+1 goes to the first half when t < mid
  std::vector<Var> per_row;
  for (std::size_t i = 0; i < starts.size();) {
    const std::size_t b = starts[i].first;
    const Span r = in.clip.ranges[b];
    const std::size_t mid = r.lo + r.length() / 2;
    std::vector<std::size_t> A, B;
    for (; i < starts.size() && starts[i].first == b; ++i) (starts[i].second < mid ? A : B).push_back(i);
    if (!A.empty() && !B.empty()) per_row.push_back(cf_distance(ad::take_rows(u, A), ad::take_rows(u, B)));
  }
  if (per_row.empty()) return {zero_loss(tape), {"empty"}};
  return {ad::mean(ad::concat(per_row, 0)), {}};
}

// ---------------------------------------------------------------------------
// Tier 2

VicregVcLoss::VicregVcLoss(std::size_t D, std::size_t dprime, double eps, double mu, std::uint64_t seed)
    : sketcher(make_sketcher(dprime, D, SketchInit::SmallGaussian, false, Rng::mix(seed, 0xd5))),
      eps(eps),
      mu(mu) {
  if (!(eps > 0.0)) throw ConfigError("vicreg eps must be positive");
}

std::vector<ParamRef> VicregVcLoss::parameters() { return {{"vicreg_vc.sketch", &sketcher.P, false}}; }

LossOutput VicregVcLoss::forward(Tape& tape, const LossInput& in) {
  const PosList pos = pooled_positions(in.clip);
  if (pos.size() < 2) return {zero_loss(tape), {"empty"}};
  Var z = sketch(tape, sketcher, gather_positions(in.hidden, pos), "vicreg_vc.sketch");
  return {vicreg_vc(z, eps, mu), {}};
}

SwIsoLoss::SwIsoLoss(std::size_t D, SketchedOptions o, std::uint64_t seed)
    : sketcher(make_sketcher(o.dprime, D, SketchInit::SmallGaussian, false, Rng::mix(seed, 0xd6))), opts(o) {}

std::vector<ParamRef> SwIsoLoss::parameters() { return {{"sw_iso.sketch", &sketcher.P, false}}; }

LossOutput SwIsoLoss::forward(Tape& tape, const LossInput& in) {
  const PosList pos = pooled_positions(in.clip);
  if (pos.empty()) return {zero_loss(tape), {"empty"}};
  const Tensor dirs = draw_dirs(in.seed, 0xd6, opts.directions, opts.dprime);
  return {sw_iso(project(tape, sketcher, gather_positions(in.hidden, pos), "sw_iso.sketch", dirs)), {}};
}

ScoreMatchLoss::ScoreMatchLoss(std::size_t D, ScoreOptions o, std::uint64_t seed) : opts(o) {
  if (!(o.lambda_sm >= 0.0)) throw ConfigError("lambda_sm must be non-negative");
  const std::size_t d = o.raw ? D : o.dprime;
  sketcher = make_sketcher(o.dprime, D, SketchInit::SmallGaussian, false, Rng::mix(seed, 0xd9));
  Rng rng(Rng::mix(seed, 0xd9a));
  l1 = make_linear(d, o.width, rng);
  l2 = make_linear(o.width, d, rng);
}

std::vector<ParamRef> ScoreMatchLoss::parameters() {
  std::vector<ParamRef> out;
  if (!opts.raw) out.push_back({"score_match.sketch", &sketcher.P, false});
  collect_params(l1, "score_match.net.0", false, out);
  collect_params(l2, "score_match.net.1", false, out);
  return out;
}

LossOutput ScoreMatchLoss::forward(Tape& tape, const LossInput& in) {
  const PosList pos = pooled_positions(in.clip);
  if (pos.empty()) return {zero_loss(tape), {"empty"}};
  Var x = gather_positions(in.hidden, pos);
  Var z = opts.raw ? x : sketch(tape, sketcher, x, "score_match.sketch");
  const std::size_t N = pos.size(), d = z.shape()[1];
  Var a = apply(tape, l1, z, "score_match.net.0");
  Var s = apply(tape, l2, ad::gelu(a), "score_match.net.1");

  // tr ds/dz = sum_h W1[h,:] W2[:,h] gelu'(a_h); one Rademacher probe per sample.
  Rng rng(Rng::mix(in.seed, 0xd9));
  Tensor v(Shape{N, d});
  for (double& e : v.data()) e = rng.rademacher();
  Var vc = tape.constant(std::move(v));
  Var W1 = tape.param("score_match.net.0.W", l1.W);
  Var W2 = tape.param("score_match.net.1.W", l2.W);
  Var tr = ad::sum(ad::matmul(vc, W2) * ad::gelu_prime(a) * ad::matmul(vc, ad::transpose(W1)), -1);

  Var hyv = ad::mean(0.5 * ad::dot(s, s) + tr);
  Var r = s + z;
  return {hyv + opts.lambda_sm * ad::mean(ad::dot(r, r)), {}};
}

CpcLoss::CpcLoss(std::size_t D, std::size_t horizon, double tau, std::uint64_t seed)
    : horizon(horizon), tau(tau) {
  if (horizon == 0) throw ConfigError("cpc horizon must be at least 1");
  if (!(tau > 0.0)) throw ConfigError("cpc temperature must be positive");
  Rng rng(Rng::mix(seed, 0xc9c));
  pred = make_linear(D, D, rng, false);
}

std::vector<ParamRef> CpcLoss::parameters() {
  std::vector<ParamRef> out;
  collect_params(pred, "cpc.pred", false, out);
  return out;
}

LossOutput CpcLoss::forward(Tape& tape, const LossInput& in) {
  PosList anchor, target;
  for (std::size_t b = 0; b < in.clip.ranges.size(); ++b) {
    const Span r = in.clip.ranges[b];
    if (!in.clip.kept(b) || r.length() <= horizon) continue;
    const std::size_t t = r.lo + (r.length() - horizon) / 2;
    anchor.emplace_back(b, t);
    target.emplace_back(b, t + horizon);
  }
  if (anchor.size() < 2) return {zero_loss(tape), {"empty"}};
  Var p = apply(tape, pred, gather_positions(in.hidden, anchor), "cpc.pred");
  Var logits = ad::matmul(p, ad::transpose(gather_positions(in.hidden, target))) * (1.0 / tau);
  return {diagonal_ce(logits), {}};
}

ByolLoss::ByolLoss(std::size_t D, std::size_t width, std::size_t out, double tau_ema, std::uint64_t seed)
    : tau_ema(tau_ema) {
  if (!(tau_ema >= 0.0 && tau_ema <= 1.0)) throw ConfigError("byol EMA rate must lie in [0, 1]");
  Rng rng(Rng::mix(seed, 0xb01));
  online = make_mlp({D, width, out}, rng);
  predictor = make_mlp({out, width, out}, rng);
  target = online;
}

std::vector<ParamRef> ByolLoss::parameters() {
  std::vector<ParamRef> out;
  collect_params(online, "byol.online", false, out);
  collect_params(predictor, "byol.pred", false, out);
  collect_params(target, "byol.target", true, out);
  return out;
}

LossOutput ByolLoss::forward(Tape& tape, const LossInput& in) {
  const Halves h = span_halves(in.clip);
  if (h.rows.empty()) return {zero_loss(tape), {"empty"}};
  Var ma = pool_groups(tape, in.hidden, h.a);
  Var mb = pool_groups(tape, in.hidden, h.b);
  auto online_branch = [&](Var m) {
    return l2_normalize_rows(apply(tape, predictor, apply(tape, online, m, "byol.online"), "byol.pred"));
  };
  auto target_branch = [&](Var m) {
    return tape.stop_gradient(l2_normalize_rows(apply(tape, target, m, "byol.target", true)));
  };
  Var da = online_branch(ma) - target_branch(mb);
  Var db = online_branch(mb) - target_branch(ma);
  return {0.5 * (ad::mean(ad::dot(da, da)) + ad::mean(ad::dot(db, db))), {}};
}

IjepaLoss::IjepaLoss(std::size_t D, IjepaOptions o, std::uint64_t seed) : opts(o) {
  if (!(o.mask_ratio > 0.0 && o.mask_ratio < 1.0)) throw ConfigError("ijepa mask ratio must lie in (0, 1)");
  Rng rng(Rng::mix(seed, 0x14e));
  predictor = make_mlp({D + o.posemb_dim, o.width, D}, rng);
  target = make_linear(D, D, rng, false);
}

std::vector<ParamRef> IjepaLoss::parameters() {
  std::vector<ParamRef> out;
  collect_params(predictor, "ijepa.pred", false, out);
  collect_params(target, "ijepa.target", true, out);
  return out;
}

LossOutput IjepaLoss::forward(Tape& tape, const LossInput& in) {
  Rng rng(Rng::mix(in.seed, 0x14e));
  std::vector<PosList> visible;
  std::vector<std::size_t> ctx_row;
  PosList masked;
  for (std::size_t b = 0; b < in.clip.ranges.size(); ++b) {
    const Span r = in.clip.ranges[b];
    const std::size_t L = r.length();
    if (!in.clip.kept(b) || L < 2) continue;
    std::size_t m = static_cast<std::size_t>(std::floor(opts.mask_ratio * static_cast<double>(L)));
    m = std::clamp<std::size_t>(m, 1, L - 1);
    const std::size_t start = r.lo + rng.index(L - m + 1);
    PosList vis;
    for (std::size_t t = r.lo; t < r.hi; ++t) {
      if (t >= start && t < start + m) {
        masked.emplace_back(b, t);
        ctx_row.push_back(visible.size());
      } else {
        vis.emplace_back(b, t);
      }
    }
    visible.push_back(std::move(vis));
  }
  if (masked.empty()) return {zero_loss(tape), {"empty"}};

  Var pooled = pool_groups(tape, in.hidden, visible);
  Tensor pe(Shape{masked.size(), opts.posemb_dim});
  for (std::size_t i = 0; i < masked.size(); ++i) {
    const auto e = sinusoidal_posemb(masked[i].second, opts.posemb_dim);
    std::copy(e.begin(), e.end(), pe.data().begin() + static_cast<std::ptrdiff_t>(i * opts.posemb_dim));
  }
  const Var parts[] = {ad::take_rows(pooled, ctx_row), tape.constant(std::move(pe))};
  Var pred = apply(tape, predictor, ad::concat(parts, 1), "ijepa.pred");
  Var tgt = tape.stop_gradient(apply(tape, target, gather_positions(in.hidden, masked), "ijepa.target", true));
  Var d = pred - tgt;
  return {ad::mean(ad::dot(d, d)), {}};
}

}  // namespace trajaux
