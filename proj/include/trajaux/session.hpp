#pragma once

// Owns one auxiliary loss and its head state (bank, EMA target, predictors)
// across calls from an external training loop.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "trajaux/diagnostics.hpp"
#include "trajaux/registry.hpp"

namespace trajaux {

class Session {
 public:
  Session(std::string_view loss, std::size_t D, const Hyper& hp = {}, std::uint64_t seed = 0);

  const std::string& loss_id() const { return id_; }
  std::size_t D() const { return D_; }
  AuxLoss& loss() { return *loss_; }

  /// Head used by Fisher/decoder-visible losses and the gradient cosine.
  void set_head(ToyLMHead head);
  const ToyLMHead* head() const { return head_ ? &*head_ : nullptr; }

  /// Value and gradients; keeps the parameter gradients for step().
  DualValue eval_with_grad(const TrajectoryBatch& batch, std::uint64_t seed);
  /// Plain SGD on the trainable loss parameters from the last evaluation.
  void step(double lr);
  void ema_tick() { loss_->ema_tick(); }
  void bank_insert(const TrajectoryBatch& batch);
  DiagnosticsReport diagnose(const TrajectoryBatch& batch, std::uint64_t seed);

 private:
  std::string id_;
  std::size_t D_;
  std::unique_ptr<AuxLoss> loss_;
  std::optional<ToyLMHead> head_;
  std::optional<DualValue> last_;
};

nlohmann::json diagnostics_json(const DiagnosticsReport& rep);

/// "key=value;key=value" (commas inside values are kept).
Hyper parse_hyper(std::string_view text);

}  // namespace trajaux
