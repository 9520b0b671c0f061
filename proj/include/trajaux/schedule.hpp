#pragma once

#include <cstddef>

#include "trajaux/autodiff.hpp"
#include "trajaux/trajectory.hpp"

namespace trajaux {

struct ScheduleConfig {
  double lambda0 = 1.0;
  std::size_t steps = 1000;  // T
  double warmup_frac = 0.25;
  double decay_frac = 0.25;
  double floor_ratio = 0.1;  // rho

  /// Throws ConfigError on a broken invariant.
  void validate() const;
};

struct LambdaValue {
  double value = 0.0;
  bool clamped = false;  // t > T, held at the final value
};

/// Linear warm-up to lambda0 on [0, T_w), plateau on [T_w, T - T_d), linear
/// decay to lambda0 * rho on [T - T_d, T].
LambdaValue lambda_at(const ScheduleConfig& cfg, std::size_t t);

/// lm + lambda * aux with gradients combined leaf-wise. Flags are taken from
/// aux.
DualValue total_loss(const DualValue& lm, const DualValue& aux, double lambda);
DualValue total_loss(const DualValue& lm, const DualValue& aux, const ScheduleConfig& cfg, std::size_t t);

/// Mean next-token NLL over every supervised position (assistant span plus
/// the end-of-turn slot, no EOS clip).
Var toy_ce(Tape& tape, Var hidden, const TrajectoryBatch& batch, const ToyLMHead& head);
/// Same on a fresh tape with gradient for "hidden".
DualValue toy_ce_loss(const TrajectoryBatch& batch, const ToyLMHead& head);

}  // namespace trajaux
