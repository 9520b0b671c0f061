#include "trajaux/schedule.hpp"

#include <algorithm>

#include "trajaux/decoder_visible.hpp"
#include "trajaux/error.hpp"
#include "trajaux/traj_losses.hpp"

namespace trajaux {

void ScheduleConfig::validate() const {
  if (!(lambda0 >= 0.0)) throw ConfigError("lambda0 must be non-negative");
  if (steps == 0) throw ConfigError("schedule needs at least one step");
  if (!(warmup_frac >= 0.0 && decay_frac >= 0.0 && warmup_frac + decay_frac <= 1.0)) {
    throw ConfigError("warmup_frac + decay_frac must lie in [0, 1]");
  }
  if (!(floor_ratio >= 0.0 && floor_ratio <= 1.0)) throw ConfigError("floor_ratio must lie in [0, 1]");
}

LambdaValue lambda_at(const ScheduleConfig& cfg, std::size_t t) {
  cfg.validate();
  const double T = static_cast<double>(cfg.steps);
  const double Tw = cfg.warmup_frac * T, Td = cfg.decay_frac * T;
  LambdaValue out;
  if (t > cfg.steps) {
    out.clamped = true;
    t = cfg.steps;
  }
  const double x = static_cast<double>(t);
  if (x < Tw) {
    out.value = cfg.lambda0 * x / Tw;
  } else if (x < T - Td) {
    out.value = cfg.lambda0;
  } else if (Td > 0.0) {
    out.value = cfg.lambda0 * (1.0 - (1.0 - cfg.floor_ratio) * (x - (T - Td)) / Td);
  } else {
    out.value = cfg.lambda0;  // no decay segment
  }
  return out;
}

DualValue total_loss(const DualValue& lm, const DualValue& aux, double lambda) {
  DualValue out;
  out.value = lm.value + lambda * aux.value;
  out.grads = lm.grads;
  for (const auto& [name, g] : aux.grads) {
    auto it = out.grads.find(name);
    if (it == out.grads.end()) {
      Tensor scaled = g;
      scaled *= lambda;
      out.grads.emplace(name, std::move(scaled));
    } else {
      if (it->second.shape() != g.shape()) throw ShapeError("total_loss: gradient shapes differ for " + name);
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += lambda * g[i];
    }
  }
  out.flags = aux.flags;
  return out;
}

DualValue total_loss(const DualValue& lm, const DualValue& aux, const ScheduleConfig& cfg, std::size_t t) {
  const LambdaValue l = lambda_at(cfg, t);
  DualValue out = total_loss(lm, aux, l.value);
  if (l.clamped) out.flags.insert("lambda_clamped");
  return out;
}

Var toy_ce(Tape& tape, Var hidden, const TrajectoryBatch& batch, const ToyLMHead& head) {
  if (!batch.has_labels()) throw DataError("cross-entropy needs labels");
  const std::size_t S = batch.S(), V = head.V();
  const auto next = next_token_labels(batch);
  std::vector<std::pair<std::size_t, std::size_t>> at;
  std::vector<std::size_t> gold;
  for (std::size_t b = 0; b < batch.B(); ++b)
    for (std::size_t t = 0; t < S; ++t) {
      const int y = next[b * S + t];
      if (y == kIgnoreLabel) continue;
      if (y < 0 || static_cast<std::size_t>(y) >= V) throw DataError("label out of vocabulary");
      gold.push_back(at.size() * V + static_cast<std::size_t>(y));
      at.emplace_back(b, t);
    }
  if (at.empty()) throw DataError("cross-entropy: no supervised positions");
  Var ls = ad::log_softmax(head_logits(tape, head, gather_positions(hidden, at)), -1, head.temperature);
  return -ad::mean(ad::take_rows(ad::reshape(ls, Shape{at.size() * V}), gold));
}

DualValue toy_ce_loss(const TrajectoryBatch& batch, const ToyLMHead& head) {
  Tape tape;
  Var h = tape.leaf("hidden", batch.hidden);
  return tape.backward(toy_ce(tape, h, batch, head));
}

}  // namespace trajaux
