#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajaux/loss.hpp"
#include "trajaux/nn.hpp"
#include "trajaux/rng.hpp"

namespace trajaux {

/// Sorted absolute token indices drawn for one row.
template <std::size_t K>
struct IndexDraw {
  std::size_t row = 0;
  std::array<std::size_t, K> idx{};
};

/// One draw of K sorted distinct indices per kept row whose clipped span
/// holds at least K positions.
template <std::size_t K>
std::vector<IndexDraw<K>> draw_indices(const ClippedSpan& clip, Rng& rng) {
  std::vector<IndexDraw<K>> out;
  for (std::size_t b = 0; b < clip.ranges.size(); ++b) {
    const Span r = clip.ranges[b];
    if (!clip.kept(b) || r.length() < K) continue;
    IndexDraw<K> d;
    d.row = b;
    const auto s = rng.sorted_sample(r.lo, r.hi, K);
    for (std::size_t k = 0; k < K; ++k) d.idx[k] = s[k];
    out.push_back(d);
  }
  return out;
}

/// Gathers h[b, t, :] for the listed (b, t) pairs into an N x D matrix.
Var gather_positions(Var hidden, const std::vector<std::pair<std::size_t, std::size_t>>& bt);

Var zero_loss(Tape& tape);

// ---------------------------------------------------------------------------
// STP and T1

/// mean_b [1 - cos(h_i2 - h_i1, h_i4 - h_i3)]; rows with a near-zero
/// velocity are skipped.
LossOutput stp_on_draws(Tape& tape, Var hidden, const std::vector<IndexDraw<4>>& draws);

/// mean_b |kappa_b|^2 with kappa the component of the averaged second
/// difference orthogonal to the chord h_t - h_s.
LossOutput ctube_on_draws(Tape& tape, Var hidden, const std::vector<IndexDraw<4>>& draws);

class StpLoss : public AuxLoss {
 public:
  std::string id() const override { return "stp"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
};

class CtubeLoss : public AuxLoss {
 public:
  std::string id() const override { return "ctube"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
};

// ---------------------------------------------------------------------------
// T2

/// g(h) = I + U U^T + diag(exp d) from a one-hidden-layer GELU network.
struct MetricHead {
  Linear hidden_layer;  // D -> width
  Linear u_out;         // width -> D * rank, zero at init
  Linear d_out;         // width -> D, bias at log_diag_init
  std::size_t D = 0, rank = 4;

  static MetricHead init(std::size_t D, std::size_t rank, std::size_t width, double log_diag_init,
                         std::uint64_t seed);
  std::vector<ParamRef> parameters(const std::string& prefix);
};

/// <x, y>_g evaluated row-wise at the rows of `at` (all N x D).
Var metric_inner(Tape& tape, const MetricHead& head, Var at, Var x, Var y, const std::string& prefix);

struct RigOptions {
  std::size_t rank = 4;
  std::size_t width = 64;
  double log_diag_init = -1000.0;
  bool euclidean = false;  // plain cosine on the same draws
};

class RigLoss : public AuxLoss {
 public:
  RigLoss(std::size_t D, RigOptions opts, std::uint64_t seed);
  std::string id() const override { return "rig"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  MetricHead head;
  RigOptions opts;
};

// ---------------------------------------------------------------------------
// JFR family

struct Centre {
  std::size_t row = 0, t = 0;  // absolute token index of the stencil centre
  std::size_t delta = 1;
};

/// Stencil centres lo + delta <= t <= hi' - 1 - delta over kept rows, with
/// an optional per-(row, t) validity mask ANDed across the three taps.
std::vector<Centre> stencil_centres(const ClippedSpan& clip, std::size_t delta,
                                    const std::vector<std::vector<bool>>* valid = nullptr);

/// Per-centre |(J(t+d) - 2 J(t) + J(t-d)) / d^2|^2 as an N-vector, and the
/// stencil itself (N x D) when `stencil` is non-null.
Var stencil_sq(Var J, const std::vector<Centre>& centres, Var* stencil = nullptr);

/// Mean over used scales of the per-scale mean stencil energy of residual J.
LossOutput multiscale_stencil_loss(Tape& tape, Var J, const ClippedSpan& clip,
                                   const std::vector<std::size_t>& scales,
                                   const std::vector<std::vector<bool>>* valid = nullptr);

/// h - batch centroid (mean over all rows at each absolute position).
Var batch_residual(Var hidden);

class JfrLoss : public AuxLoss {
 public:
  std::string id() const override { return "jfr"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
};

class MstbJfrLoss : public AuxLoss {
 public:
  explicit MstbJfrLoss(std::vector<std::size_t> scales = {1, 2, 3}, bool raw = false)
      : scales(std::move(scales)), raw(raw) {}
  std::string id() const override { return "mstb_jfr"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;

  std::vector<std::size_t> scales;
  bool raw;  // stencil on raw h instead of residuals
};

class DstJfrLoss : public AuxLoss {
 public:
  explicit DstJfrLoss(std::vector<int> layers = {4, 8, 12, 16}, int final_layer = 16)
      : layers(std::move(layers)), final_layer(final_layer) {}
  std::string id() const override { return "dst_jfr"; }
  bool needs_layers() const override { return true; }
  LossOutput forward(Tape& tape, const LossInput& in) override;

  std::vector<int> layers;
  int final_layer;
};

// ---------------------------------------------------------------------------
// T3-Local

struct BankEntry {
  std::vector<double> anchor;
  Tensor trajectory;  // L x D
};

class MemoryBank {
 public:
  MemoryBank(std::size_t capacity = 512, std::size_t k = 8, double tau = 0.1)
      : capacity_(capacity), k_(k), tau_(tau) {}

  void insert(BankEntry e);
  void reset() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t k() const noexcept { return k_; }
  double tau() const noexcept { return tau_; }
  const std::deque<BankEntry>& entries() const noexcept { return entries_; }

  struct Neighbour {
    std::size_t index;  // position in entries(), oldest first
    double cosine;
    double weight;
  };
  /// Top-min(k, size) entries by anchor cosine, softmax(cos / tau) weights.
  std::vector<Neighbour> retrieve(std::span<const double> anchor) const;

 private:
  std::size_t capacity_, k_;
  double tau_;
  std::deque<BankEntry> entries_;
};

/// Mean of the prompt span if present, else of [0, lo), else of the clipped span.
std::vector<double> row_anchor(const TrajectoryBatch& batch, const ClippedSpan& clip, std::size_t b);

struct LocalCentroid {
  Tensor centroid;                       // B x S x D, zero where invalid
  std::vector<std::vector<bool>> valid;  // B x S
  std::vector<bool> fallback;            // rows with no bank neighbours
};

/// Retrieval-weighted neighbour trajectory per row at relative positions;
/// neighbours that cover a position are renormalised over.
LocalCentroid local_centroid(const TrajectoryBatch& batch, const ClippedSpan& clip,
                             const MemoryBank& bank);

/// h - sg[centroid], or h - live batch mean on fallback rows (raises "fallback").
Var local_residual(Tape& tape, Var hidden, Var centroid, const LocalCentroid& lc, Flags& flags);

/// T3 stencil on h - sg[centroid] with validity ANDed across taps. Rows
/// flagged in `fallback` use the live batch centroid instead.
LossOutput local_jfr_on_centroid(Tape& tape, Var hidden, Var centroid, const LocalCentroid& lc,
                                 const ClippedSpan& clip);

class LocalJfrLoss : public AuxLoss {
 public:
  explicit LocalJfrLoss(MemoryBank bank = MemoryBank()) : bank(std::move(bank)) {}
  std::string id() const override { return "local_jfr"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  void bank_insert(const TrajectoryBatch& batch, const ClippedSpan& clip) override;

  MemoryBank bank;
};

void bank_update(MemoryBank& bank, const TrajectoryBatch& batch, const ClippedSpan& clip);

// ---------------------------------------------------------------------------
// T7

/// Symmetric in-batch InfoNCE given L2-normalised views (N x P each).
Var symmetric_info_nce(Var za, Var zb, double tau);

/// -mean_i log softmax(logits)_ii for a square logit matrix.
Var diagonal_ce(Var logits);

/// Row-normalise an N x P matrix.
Var l2_normalize_rows(Var z);

/// Constant G x (B*S) averaging matrix times the flattened hidden states.
Var pool_groups(Tape& tape, Var hidden, const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& groups);

/// Span halves at mid = lo + floor(L / 2) for kept rows with L >= 2.
struct Halves {
  std::vector<std::size_t> rows;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> a, b;
};
Halves span_halves(const ClippedSpan& clip);

class ContrastiveLoss : public AuxLoss {
 public:
  ContrastiveLoss(std::size_t D, std::size_t P, double tau, std::uint64_t seed);
  std::string id() const override { return "contrastive"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Mlp proj;
  double tau;
};

// ---------------------------------------------------------------------------
// T9 (decode-time, not a loss)

enum class ShrinkProfile { HardClip, Smooth };

struct TubeProjector {
  TubeProjector(double eps, std::size_t history = 4, ShrinkProfile profile = ShrinkProfile::HardClip);

  /// Projects and appends the result to the history.
  std::vector<double> project(std::span<const double> h_raw);
  /// Projects without touching the history.
  std::vector<double> project_frozen(std::span<const double> h_raw) const;
  /// Unit tangent from the history, or empty with fewer than two states.
  std::vector<double> tangent() const;
  double alpha(double r) const;

  double eps;
  std::size_t k;
  ShrinkProfile profile;
  std::deque<std::vector<double>> history;
};

}  // namespace trajaux
