#include "trajaux/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "trajaux/error.hpp"
#include "trajaux/schedule.hpp"

namespace trajaux {

namespace {

double row_cosine(const double* a, const double* b, std::size_t D) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    ab += a[d] * b[d];
    aa += a[d] * a[d];
    bb += b[d] * b[d];
  }
  const double den = std::sqrt(aa) * std::sqrt(bb);
  return den > 0.0 ? ab / den : 0.0;
}

// h minus the mean over all rows at each absolute position.
Tensor centred(const Tensor& h) {
  const std::size_t B = h.dim(0), S = h.dim(1), D = h.dim(2);
  Tensor J = h;
  for (std::size_t t = 0; t < S; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double m = 0.0;
      for (std::size_t b = 0; b < B; ++b) m += h.at(b, t, d);
      m /= static_cast<double>(B);
      for (std::size_t b = 0; b < B; ++b) J.at(b, t, d) -= m;
    }
  return J;
}

Attribution bucket_energy(const Tensor& J, const ClippedSpan& clip, const std::vector<std::size_t>& scales,
                          const std::vector<std::vector<bool>>* valid) {
  const std::size_t S = J.dim(1), D = J.dim(2);
  Attribution a;
  std::array<double, 3> sum{};
  for (std::size_t delta : scales) {
    const double inv = 1.0 / static_cast<double>(delta * delta);
    for (const Centre& c : stencil_centres(clip, delta, valid)) {
      const double* m = J.data().data() + (c.row * S + c.t - delta) * D;
      const double* o = J.data().data() + (c.row * S + c.t) * D;
      const double* p = J.data().data() + (c.row * S + c.t + delta) * D;
      double e = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double s = (p[d] - 2.0 * o[d] + m[d]) * inv;
        e += s * s;
      }
      const Span r = clip.ranges[c.row];
      const Bucket k = bucket_of(c.t - r.lo, r.length());
      sum[k] += e;
      ++a.count[k];
    }
  }
  for (std::size_t k = 0; k < 3; ++k) a.mean[k] = a.count[k] ? sum[k] / static_cast<double>(a.count[k]) : 0.0;
  return a;
}

}  // namespace

double anisotropy(const Tensor& states, std::size_t max_pairs, Rng& rng) {
  if (states.rank() != 2) throw ShapeError("anisotropy: expected N x D states");
  const std::size_t N = states.dim(0), D = states.dim(1);
  if (N < 2) throw DataError("anisotropy needs at least two states");
  if (max_pairs == 0) throw ConfigError("anisotropy needs max_pairs >= 1");
  const std::size_t total = N * (N - 1) / 2;
  const double* h = states.data().data();
  double s = 0.0;
  std::size_t used = 0;
  if (total <= max_pairs) {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = i + 1; j < N; ++j) s += row_cosine(h + i * D, h + j * D, D);
    used = total;
  } else {
    // pair index p enumerates (i, j), i < j, row-major; walk rows while the
    // sorted indices advance
    const auto picks = rng.sorted_sample(0, total, max_pairs);
    std::size_t i = 0, row_start = 0;
    for (std::size_t p : picks) {
      while (p >= row_start + (N - 1 - i)) {
        row_start += N - 1 - i;
        ++i;
      }
      const std::size_t j = i + 1 + (p - row_start);
      s += row_cosine(h + i * D, h + j * D, D);
    }
    used = picks.size();
  }
  return s / static_cast<double>(used);
}

CurvatureResult curvature(const TrajectoryBatch& batch, const ClippedSpan& clip) {
  const Tensor& h = batch.hidden;
  const std::size_t S = batch.S(), D = batch.D();
  CurvatureResult out;
  double total = 0.0;
  std::vector<double> v1(D), v2(D);
  for (std::size_t b = 0; b < batch.B(); ++b) {
    const Span r = clip.ranges[b];
    if (!clip.kept(b) || r.length() < 3) continue;
    double row = 0.0;
    std::size_t n = 0;
    for (std::size_t t = r.lo; t + 2 < r.hi; ++t) {
      double n1 = 0.0, n2 = 0.0, dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        v1[d] = h[(b * S + t + 1) * D + d] - h[(b * S + t) * D + d];
        v2[d] = h[(b * S + t + 2) * D + d] - h[(b * S + t + 1) * D + d];
        n1 += v1[d] * v1[d];
        n2 += v2[d] * v2[d];
        dot += v1[d] * v2[d];
      }
      if (std::sqrt(n1) < 1e-12 || std::sqrt(n2) < 1e-12) {
        ++out.skipped_velocities;
        continue;
      }
      row += std::acos(std::clamp(dot / (std::sqrt(n1) * std::sqrt(n2)), -1.0, 1.0));
      ++n;
    }
    if (n == 0) continue;
    total += row / static_cast<double>(n);
    ++out.rows;
  }
  if (out.rows == 0) throw DataError("curvature: no row with three usable states");
  out.radians = total / static_cast<double>(out.rows);
  return out;
}

GradCosine grad_cosine(std::span<const double> g_aux, std::span<const double> g_ce) {
  if (g_aux.size() != g_ce.size()) throw ShapeError("grad_cosine: gradient lengths differ");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < g_aux.size(); ++i) {
    ab += g_aux[i] * g_ce[i];
    aa += g_aux[i] * g_aux[i];
    bb += g_ce[i] * g_ce[i];
  }
  if (aa == 0.0 || bb == 0.0) return {std::numeric_limits<double>::quiet_NaN(), true};
  return {std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0), false};
}

Bucket bucket_of(std::size_t rel, std::size_t L) {
  if (L == 0) throw DataError("bucket_of: empty span");
  // compare 3 (rel + 0.5) against L to stay exact
  const double x = 3.0 * (static_cast<double>(rel) + 0.5);
  const double l = static_cast<double>(L);
  if (x < l) return kFront;
  if (x < 2.0 * l) return kMiddle;
  return kEnd;
}

Attribution attribution(const TrajectoryBatch& batch, const ClippedSpan& clip, const AuxLoss& loss) {
  if (dynamic_cast<const JfrLoss*>(&loss)) return bucket_energy(centred(batch.hidden), clip, {1}, nullptr);
  if (const auto* m = dynamic_cast<const MstbJfrLoss*>(&loss)) {
    return bucket_energy(m->raw ? batch.hidden : centred(batch.hidden), clip, m->scales, nullptr);
  }
  if (const auto* d = dynamic_cast<const DstJfrLoss*>(&loss)) {
    Attribution avg;
    for (int layer : d->layers) {
      const Tensor* H = &batch.hidden;
      if (layer != d->final_layer) {
        auto it = batch.layer_stack.find(layer);
        if (it == batch.layer_stack.end()) {
          throw DataError("attribution: layer " + std::to_string(layer) + " missing from layer stack");
        }
        H = &it->second;
      }
      const Attribution a = bucket_energy(centred(*H), clip, {1}, nullptr);
      for (std::size_t k = 0; k < 3; ++k) {
        avg.mean[k] += a.mean[k] / static_cast<double>(d->layers.size());
        avg.count[k] += a.count[k];
      }
    }
    return avg;
  }
  if (const auto* l = dynamic_cast<const LocalJfrLoss*>(&loss)) {
    const LocalCentroid lc = local_centroid(batch, clip, l->bank);
    const Tensor mean_res = centred(batch.hidden);
    Tensor J = batch.hidden;
    const std::size_t S = batch.S(), D = batch.D();
    for (std::size_t b = 0; b < batch.B(); ++b)
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t d = 0; d < D; ++d) {
          J.at(b, t, d) = lc.fallback[b] ? mean_res.at(b, t, d) : J.at(b, t, d) - lc.centroid.at(b, t, d);
        }
    return bucket_energy(J, clip, {1}, &lc.valid);
  }
  throw ConfigError("attribution is defined for jfr, mstb_jfr, dst_jfr and local_jfr, not " + loss.id());
}

bool active_inert(double delta_g, double rho, double delta_em, const ActiveInertThresholds& th) {
  return delta_g > 0.0 && std::abs(rho) <= th.rho_max && std::abs(delta_em) <= th.eps_em;
}

DiagnosticsReport diagnose(const TrajectoryBatch& batch, AuxLoss& loss, const ToyLMHead* head,
                           std::uint64_t seed, std::size_t max_pairs) {
  batch.validate();
  DiagnosticsReport rep;
  const ClippedSpan clip = eos_clip(batch, loss.margin, loss.min_len);
  const std::size_t S = batch.S(), D = batch.D();

  std::vector<double> rows;
  std::size_t N = 0;
  for (std::size_t b = 0; b < batch.B(); ++b) {
    if (!clip.kept(b)) continue;
    for (std::size_t t = clip.ranges[b].lo; t < clip.ranges[b].hi; ++t, ++N) {
      const auto row = batch.hidden.data().subspan((b * S + t) * D, D);
      rows.insert(rows.end(), row.begin(), row.end());
    }
  }
  if (N >= 2) {
    Rng rng(Rng::mix(seed, 0xa1));
    rep.anisotropy = anisotropy(Tensor(Shape{N, D}, std::move(rows)), max_pairs, rng);
  } else {
    rep.anisotropy = std::numeric_limits<double>::quiet_NaN();
    rep.flags.insert("anisotropy_undefined");
  }

  try {
    rep.curvature = curvature(batch, clip);
  } catch (const DataError&) {
    rep.curvature.radians = std::numeric_limits<double>::quiet_NaN();
    rep.flags.insert("curvature_undefined");
  }

  if (head && batch.has_labels()) {
    const DualValue aux = evaluate(loss, batch, head, seed);
    const DualValue ce = toy_ce_loss(batch, *head);
    rep.grad_cosine = grad_cosine(aux.grad("hidden").data(), ce.grad("hidden").data());
    if (rep.grad_cosine->nan) rep.flags.insert("grad_cosine_nan");
    for (const auto& f : aux.flags) rep.flags.insert("aux_" + f);
  } else if (loss.needs_head() && !head) {
    throw ConfigError(loss.id() + " needs the LM head");
  }

  try {
    rep.attribution = attribution(batch, clip, loss);
  } catch (const ConfigError&) {
    // not a JFR-family loss
  }
  return rep;
}

}  // namespace trajaux
