#pragma once

// Common shape of every auxiliary loss plus the evaluation and gradient-check
// drivers built on top of it.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "trajaux/autodiff.hpp"
#include "trajaux/nn.hpp"
#include "trajaux/trajectory.hpp"

namespace trajaux {

using Flags = std::set<std::string, std::less<>>;

struct LossInput {
  const TrajectoryBatch* batch = nullptr;
  ClippedSpan clip;
  Var hidden;                 // leaf "hidden", B x S x D
  std::map<int, Var> layers;  // leaves "layer.<l>" when the loss asks for them
  const ToyLMHead* head = nullptr;
  std::uint64_t seed = 0;     // per-evaluation stream for samplers and directions
};

struct LossOutput {
  Var value;
  Flags flags;
};

class AuxLoss {
 public:
  virtual ~AuxLoss() = default;

  virtual std::string id() const = 0;
  virtual LossOutput forward(Tape& tape, const LossInput& in) = 0;
  virtual std::vector<ParamRef> parameters() { return {}; }

  virtual bool needs_head() const { return false; }
  virtual bool needs_labels() const { return false; }
  virtual bool needs_layers() const { return false; }
  /// Loss-specific state updates after an optimizer step.
  virtual void ema_tick() {}
  virtual void bank_insert(const TrajectoryBatch&, const ClippedSpan&) {}
  void after_step(const TrajectoryBatch& batch, const ClippedSpan& clip) {
    ema_tick();
    bank_insert(batch, clip);
  }

  std::size_t margin = 2;
  std::size_t min_len = 3;
};

/// Registers hidden (and layer) leaves plus every loss parameter on `tape`
/// and fills a LossInput for `batch`.
LossInput make_input(Tape& tape, AuxLoss& loss, const TrajectoryBatch& batch, const ToyLMHead* head,
                     std::uint64_t seed);

/// One forward + backward pass. Gradients cover "hidden", any "layer.<l>"
/// leaves and every parameter of the loss.
DualValue evaluate(AuxLoss& loss, const TrajectoryBatch& batch, const ToyLMHead* head,
                   std::uint64_t seed);

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h over every coordinate.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

struct GradCheckOptions {
  double h_rel = 1e-6;         // h = h_rel * (1 + |x_i|)
  std::size_t budget = 256;    // coordinates checked per leaf; 0 = all
  double floor = 1e-10;        // lower bound on the error denominator
  std::uint64_t seed = 0;      // coordinate subsampling
};

struct LeafCheck {
  std::string name;
  double rel_err = 0.0;  // max |analytic - fd| over checked coords / max(|analytic|_inf, floor)
  double grad_scale = 0.0;
  std::size_t coords = 0;
};

/// `build` constructs the scalar on a fresh tape, reading leaf values from
/// the tensors in `leaves`; those tensors are perturbed in place and
/// restored. Stop-gradient values are replayed from the unperturbed pass.
std::vector<LeafCheck> check_gradients(const std::function<Var(Tape&)>& build,
                                       const std::map<std::string, Tensor*>& leaves,
                                       const GradCheckOptions& opts);

/// check_gradients for `loss` on `batch`: hidden, any layer stacks the loss
/// reads and every trainable parameter. Frozen parameters are skipped.
std::vector<LeafCheck> check_loss_gradients(AuxLoss& loss, TrajectoryBatch& batch, const ToyLMHead* head,
                                            std::uint64_t seed, const GradCheckOptions& opts = {});

}  // namespace trajaux
