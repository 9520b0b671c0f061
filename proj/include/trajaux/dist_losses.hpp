#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "trajaux/loss.hpp"
#include "trajaux/nn.hpp"
#include "trajaux/rng.hpp"
#include "trajaux/traj_losses.hpp"

namespace trajaux {

// ---------------------------------------------------------------------------
// Building blocks

/// Closed-form weighted CF distance of a 1-D sample to N(0, 1).
double epps_pulley(std::span<const double> u);
/// Column-wise statistic for u of shape N x M; returns an M-vector.
Var epps_pulley(Var u);

/// <K>_XX - 2 <K>_XY + <K>_YY with K(z) = exp(-z^2 / 4).
double cf_distance(std::span<const double> x, std::span<const double> y);
/// Column-wise for X (n x M) and Y (m x M); returns an M-vector.
Var cf_distance(Var x, Var y);

/// M unit rows in R^dim.
Tensor random_directions(std::size_t M, std::size_t dim, Rng& rng);

/// Variance hinge plus off-diagonal covariance penalty of z (N x d'),
/// population moments.
Var vicreg_vc(Var z, double eps = 1e-4, double mu = 1.0);

/// mean over columns of mean_i (sorted u_i - Phi^{-1}((i - 1/2) / N))^2.
Var sw_iso(Var u);
double normal_quantile(double p);

/// |h_r - (h_s + h_t)/2|^2 / (|h_t - h_s|^2 / 4) per triple.
Var sectional_curvature(Var hidden, const std::vector<IndexDraw<3>>& triples);

/// Mean of v^T A v over Rademacher probes, with `quad(v)` = v^T A v.
double hutchinson_trace(const std::function<double(const std::vector<double>&)>& quad,
                        std::size_t dim, std::size_t probes, Rng& rng);

/// Sinusoidal embedding of an absolute position.
std::vector<double> sinusoidal_posemb(std::size_t t, std::size_t dim);

/// Clipped positions of kept rows as (row, t) pairs.
std::vector<std::pair<std::size_t, std::size_t>> pooled_positions(const ClippedSpan& clip);

/// Unit step tangents (h_{t+1} - h_t)/|.| inside each kept row's clipped
/// span; steps shorter than 1e-12 are skipped. `starts` receives (row, t)
/// of every kept step. Returns an invalid Var when nothing survives.
Var unit_tangents(Var hidden, const ClippedSpan& clip,
                  std::vector<std::pair<std::size_t, std::size_t>>* starts = nullptr);

// ---------------------------------------------------------------------------
// Tier 1

struct SketchedOptions {
  std::size_t dprime = 64;
  std::size_t directions = 64;
};

class SigregStateLoss : public AuxLoss {
 public:
  SigregStateLoss(std::size_t D, SketchedOptions o, std::uint64_t seed);
  std::string id() const override { return "sigreg_state"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;
  SketchedOptions opts;
};

class SigregTangentLoss : public AuxLoss {
 public:
  SigregTangentLoss(std::size_t D, SketchedOptions o, std::uint64_t seed);
  std::string id() const override { return "sigreg_tangent"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;
  SketchedOptions opts;
};

/// Symmetric triples (r - d, r, r + d) so an equal-step line scores 0.
std::vector<IndexDraw<3>> draw_symmetric_triples(const ClippedSpan& clip, std::size_t per_row, Rng& rng);

class SectionalLoss : public AuxLoss {
 public:
  explicit SectionalLoss(std::size_t triples_per_row = 4) : per_row(triples_per_row) {}
  std::string id() const override { return "ctube_sectional"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;

  std::size_t per_row;
};

class StpCmfLoss : public AuxLoss {
 public:
  StpCmfLoss(std::size_t D, SketchedOptions o, std::uint64_t seed);
  std::string id() const override { return "stp_cmf"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;  // frozen Xavier
  SketchedOptions opts;
};

// ---------------------------------------------------------------------------
// Tier 2

class VicregVcLoss : public AuxLoss {
 public:
  VicregVcLoss(std::size_t D, std::size_t dprime, double eps, double mu, std::uint64_t seed);
  std::string id() const override { return "vicreg_vc"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;
  double eps, mu;
};

class SwIsoLoss : public AuxLoss {
 public:
  SwIsoLoss(std::size_t D, SketchedOptions o, std::uint64_t seed);
  std::string id() const override { return "sw_iso"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;
  SketchedOptions opts;
};

struct ScoreOptions {
  std::size_t dprime = 64;
  std::size_t width = 128;
  double lambda_sm = 1.0;
  bool raw = false;  // score net on raw h instead of the sketch
};

class ScoreMatchLoss : public AuxLoss {
 public:
  ScoreMatchLoss(std::size_t D, ScoreOptions o, std::uint64_t seed);
  std::string id() const override { return "score_match"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Sketcher sketcher;
  Linear l1, l2;
  ScoreOptions opts;
};

class CpcLoss : public AuxLoss {
 public:
  CpcLoss(std::size_t D, std::size_t horizon, double tau, std::uint64_t seed);
  std::string id() const override { return "cpc"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Linear pred;  // D -> D, no bias
  std::size_t horizon;
  double tau;
};

class ByolLoss : public AuxLoss {
 public:
  ByolLoss(std::size_t D, std::size_t width, std::size_t out, double tau_ema, std::uint64_t seed);
  std::string id() const override { return "byol"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;
  void ema_tick() override { ema_update(target, online, tau_ema); }

  Mlp online, predictor, target;
  double tau_ema;
};

struct IjepaOptions {
  double mask_ratio = 0.25;
  std::size_t posemb_dim = 32;
  std::size_t width = 256;
};

class IjepaLoss : public AuxLoss {
 public:
  IjepaLoss(std::size_t D, IjepaOptions o, std::uint64_t seed);
  std::string id() const override { return "ijepa"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override;

  Mlp predictor;
  Linear target;  // frozen
  IjepaOptions opts;
};

}  // namespace trajaux
