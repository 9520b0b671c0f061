#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trajaux/autodiff.hpp"
#include "trajaux/tensor.hpp"

namespace trajaux {

/// Half-open token range [lo, hi).
struct Span {
  std::size_t lo = 0, hi = 0;
  std::size_t length() const noexcept { return hi > lo ? hi - lo : 0; }
  bool operator==(const Span&) const = default;
};

inline constexpr int kIgnoreLabel = -100;

struct TrajectoryBatch {
  Tensor hidden;                          // B x S x D
  std::vector<Span> spans;                // assistant span per row
  std::map<int, Tensor> layer_stack;      // layer index -> B x S x D
  std::vector<int> labels;                // B x S, HF shift, empty when absent
  std::vector<Span> prompt_spans;         // user-message span per row, may be empty

  std::size_t B() const { return hidden.dim(0); }
  std::size_t S() const { return hidden.dim(1); }
  std::size_t D() const { return hidden.dim(2); }
  bool has_labels() const { return !labels.empty(); }
  int label(std::size_t b, std::size_t t) const { return labels[b * S() + t]; }

  /// Throws ShapeError / DataError on any broken invariant.
  void validate() const;
};

struct ClippedSpan {
  std::vector<Span> ranges;
  std::vector<bool> dropped;

  bool kept(std::size_t b) const { return !dropped[b]; }
  std::size_t kept_count() const;
};

ClippedSpan eos_clip(const TrajectoryBatch& batch, std::size_t margin = 2, std::size_t min_len = 3);

struct SynthConfig {
  std::size_t B = 4, S = 48, D = 32, V = 64;
  std::size_t min_span = 8, max_span = 24;
  double curvature = 0.5;  // c in [0, 1]
  double noise = 0.0;      // iid gaussian added on top of the smooth curve
  double step = 0.5;       // ray speed per token
  std::vector<int> layers{4, 8, 12, 16};
  int final_layer = 16;
  bool with_labels = true;
  std::uint64_t seed = 0;
};

struct ToyLMHead {
  Tensor W;  // V x D
  double temperature = 1.0;

  std::size_t V() const { return W.dim(0); }
  std::size_t D() const { return W.dim(1); }
};

/// Gaussian head with entry scale D^{-1/2}, so logits are O(|h|).
ToyLMHead make_toy_head(std::size_t V, std::size_t D, std::uint64_t seed);

/// Smooth synthetic trajectories. Every row is a ray plus c times a
/// low-frequency sinusoidal deflection, defined at all S positions. When a
/// head is given and cfg.with_labels is set, labels are the head's argmax on
/// the noiseless curve.
TrajectoryBatch synth_batch(const SynthConfig& cfg, const ToyLMHead* head = nullptr);

Tensor head_logits(const ToyLMHead& head, const Tensor& h);
Var head_logits(Tape& tape, const ToyLMHead& head, Var h, const std::string& name = "head.W");

enum class SketchInit { SmallGaussian, Xavier };

struct Sketcher {
  Tensor P;  // d' x D
  bool frozen = false;
  SketchInit init = SketchInit::SmallGaussian;
};

Sketcher make_sketcher(std::size_t dprime, std::size_t D, SketchInit init, bool frozen,
                       std::uint64_t seed, double small_scale = 1e-2);

/// x P^T for x of shape N x D.
Tensor sketch(const Sketcher& s, const Tensor& x);
Var sketch(Tape& tape, const Sketcher& s, Var x, const std::string& name);

}  // namespace trajaux
