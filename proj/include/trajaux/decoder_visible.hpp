#pragma once

// Losses that read the frozen LM head: Fisher-metric stencils, margin
// weighting, PCGrad surgery and the decoder-visible predictor.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajaux/loss.hpp"
#include "trajaux/nn.hpp"
#include "trajaux/traj_losses.hpp"

namespace trajaux {

/// Row-wise softmax of an N x V logit tensor (plain values).
Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);

/// Var_{y~p}[(W v)_y] = v^T G(h) v with p = softmax(W h).
double fisher_norm_sq(const ToyLMHead& head, std::span<const double> h, std::span<const double> v);
/// Row-wise for p (N x V, a stop-gradient node) and v (N x D).
Var fisher_norm_sq(Tape& tape, const ToyLMHead& head, Var p, Var v);

/// sg[softmax(W h / temperature)] for h of shape N x D.
Var frozen_probs(Tape& tape, const ToyLMHead& head, Var h, double temperature = 1.0);
/// Dense W^T (diag p - p p^T) W, for checking.
Tensor fisher_matrix(const ToyLMHead& head, std::span<const double> h);

// ---------------------------------------------------------------------------
// Margin weights

struct MarginWeightConfig {
  double gamma = 1.0;
  double q = 0.5;
};

struct MarginWeights {
  std::vector<double> w;         // per position, 1 where unsupervised
  std::vector<double> margin;    // NaN where unsupervised
  double tau = 0.0;
  bool empty = true;             // no supervised position
};

/// labels[i] is the gold next token for logit row i, or kIgnoreLabel.
MarginWeights margin_weights(const Tensor& logits, std::span<const int> labels,
                             const MarginWeightConfig& cfg = {});

/// Linear-interpolation quantile of a non-empty sample.
double quantile(std::vector<double> xs, double q);

/// Next-token gold label for every (b, t) of the batch: label(b, t + 1).
std::vector<int> next_token_labels(const TrajectoryBatch& batch);

// ---------------------------------------------------------------------------
// Fisher JFR family

enum class FisherVariant { Jfr, Mstb, Local };

struct FisherOptions {
  FisherVariant variant = FisherVariant::Jfr;
  std::vector<std::size_t> scales{1, 2, 3};  // Mstb only
  bool margin_weighting = false;
  MarginWeightConfig margin{};
};

/// Multiscale stencil of J scored with the Fisher norm at each centre's
/// hidden state. `weights` (B*S, optional) multiplies every centre term.
LossOutput fisher_stencil_loss(Tape& tape, Var J, Var hidden, const ToyLMHead& head,
                               const ClippedSpan& clip, const std::vector<std::size_t>& scales,
                               const std::vector<std::vector<bool>>* valid = nullptr,
                               const std::vector<double>* weights = nullptr);

class FisherJfrLoss : public AuxLoss {
 public:
  explicit FisherJfrLoss(FisherOptions opts = {}, MemoryBank bank = MemoryBank())
      : opts(std::move(opts)), bank(std::move(bank)) {}
  std::string id() const override;
  LossOutput forward(Tape& tape, const LossInput& in) override;
  bool needs_head() const override { return true; }
  bool needs_labels() const override { return opts.margin_weighting; }
  void bank_insert(const TrajectoryBatch& batch, const ClippedSpan& clip) override;

  FisherOptions opts;
  MemoryBank bank;  // Local only
};

// ---------------------------------------------------------------------------
// PCGrad

/// g_aux - min(0, c) g_ce with c = <g_aux, g_ce> / (|g_ce|^2 + eps).
std::vector<double> pcgrad(std::span<const double> g_aux, std::span<const double> g_ce, double eps = 1e-12);

// ---------------------------------------------------------------------------
// Decoder-visible predictor

struct DvJepaOptions {
  std::vector<std::size_t> horizons{2, 3, 4};
  std::size_t width = 512;
  double tau_kl = 1.0;
  double margin = 1.0;
  double beta = 1.0;
};

/// q(h, k) = h + MLP(h + e_k), output layer zero at init.
struct DvJepaHead {
  Mlp mlp;
  Tensor emb;  // |horizons| x D
  std::vector<std::size_t> horizons;

  static DvJepaHead init(std::size_t D, const DvJepaOptions& o, std::uint64_t seed);
  std::vector<ParamRef> parameters(const std::string& prefix);
};

Var dv_predict(Tape& tape, const DvJepaHead& head, Var h, std::size_t horizon_slot, const std::string& prefix);

/// KL(p || softmax(logits / tau)) per row; p should be a stop-gradient node.
Var kl_rows(Tape& tape, Var p, Var logits, double tau);

/// mean over rows with labels[i] != kIgnoreLabel of
/// max(0, m - z_y + max_{j != y} z_j); flagged "empty" when there are none.
LossOutput dv_margin_hinge(Tape& tape, Var logits, std::span<const int> labels, double m);

class DvJepaLoss : public AuxLoss {
 public:
  DvJepaLoss(std::size_t D, DvJepaOptions o, std::uint64_t seed);
  std::string id() const override { return "dv_jepa"; }
  LossOutput forward(Tape& tape, const LossInput& in) override;
  std::vector<ParamRef> parameters() override { return head.parameters("dv_jepa"); }
  bool needs_head() const override { return true; }

  /// KL part only.
  LossOutput kl_term(Tape& tape, const LossInput& in);
  /// Hinge part only, over every supervised position (not EOS-clipped).
  LossOutput hinge_term(Tape& tape, const LossInput& in);

  DvJepaHead head;
  DvJepaOptions opts;
};

// ---------------------------------------------------------------------------
// Local KL calibration

struct KlRatio {
  double s = 0.0;
  double kl2 = 0.0;     // 2 KL(p_h || p_{h + s v})
  double fisher = 0.0;  // (s v)^T G (s v)
  double ratio = 0.0;   // NaN when both sides vanish
  bool degenerate = false;
};

std::vector<KlRatio> fisher_kl_check(const ToyLMHead& head, std::span<const double> h,
                                     std::span<const double> v, std::span<const double> scales);

}  // namespace trajaux
