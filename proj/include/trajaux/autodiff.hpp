#pragma once

// Reverse-mode differentiation over dense Tensors.
//
// A Tape records primitive applications in creation order, which is a
// topological order, so backward() is a single reverse sweep. Binary
// elementwise primitives follow numpy broadcasting (shapes aligned from the
// right, extent-1 axes stretched). Reductions take an axis; negative axes
// count from the end.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trajaux/tensor.hpp"

namespace trajaux {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives
/// and has not been reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Scalar value with gradients for every registered leaf, plus the loss
/// flags raised while computing it ("empty", "fallback", ...).
struct DualValue {
  double value = 0.0;
  std::map<std::string, Tensor, std::less<>> grads;
  std::set<std::string, std::less<>> flags;

  const Tensor& grad(std::string_view leaf) const;
  bool has_grad(std::string_view leaf) const { return grads.find(leaf) != grads.end(); }
  bool flagged(std::string_view flag) const { return flags.find(flag) != flags.end(); }
};

/// Receives dL/d(out) and accumulates into the parents' gradient buffers.
/// A parent slot is null when that parent does not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable leaf. Registering an existing name returns
  /// the original leaf, so a parameter shared between branches is one leaf.
  Var leaf(const std::string& name, const Tensor& value);

  /// Leaf for a head parameter. Frozen parameters are still registered (and
  /// receive an all-zero gradient entry) but enter the graph through
  /// stop_gradient.
  Var param(const std::string& name, const Tensor& value, bool frozen = false);

  Var constant(Tensor value);

  /// Same value as x, contributes nothing upstream. When a replay list is
  /// installed the i-th call returns the i-th recorded value instead, which
  /// is how finite differences hold stop-gradient targets fixed.
  Var stop_gradient(Var x);

  bool has_leaf(std::string_view name) const;
  Var leaf_var(std::string_view name) const;

  DualValue backward(Var root);
  void reset();

  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void replay_stop_gradients(std::vector<Tensor> values);
  const std::vector<Tensor>& stop_gradient_log() const noexcept { return sg_log_; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;  // deque: references to values stay valid
  std::vector<std::pair<std::string, std::size_t>> leaves_;
  std::vector<Tensor> sg_log_;
  std::optional<std::vector<Tensor>> sg_replay_;
  std::size_t sg_cursor_ = 0;
};

namespace ad {

// Elementwise binary (broadcasting).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

// Elementwise unary.
Var neg(Var x);
Var scale(Var x, double c);
Var shift(Var x, double c);
Var square(Var x);
Var sqrt(Var x);
Var exp(Var x);
Var log(Var x);
Var abs(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);
/// Exact GELU, x * Phi(x).
Var gelu(Var x);
/// d/dx GELU(x) = Phi(x) + x phi(x); differentiable itself.
Var gelu_prime(Var x);
/// Inputs within 1e-12 outside [-1, 1] are clamped; further out throws.
Var arccos(Var x);

// Reductions.
Var sum(Var x);
Var sum(Var x, int axis, bool keepdims = false);
Var mean(Var x);
Var mean(Var x, int axis, bool keepdims = false);
Var max(Var x, int axis, bool keepdims = false);
Var logsumexp(Var x, int axis, bool keepdims = false);
Var softmax(Var x, int axis = -1, double temperature = 1.0);
Var log_softmax(Var x, int axis = -1, double temperature = 1.0);

// Structural.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var x, Shape shape);
/// Treats x as rows of its last extent and gathers the listed rows: a
/// [..., D] tensor yields [indices.size(), D].
Var take_rows(Var x, std::span<const std::size_t> indices);
Var concat(std::span<const Var> parts, int axis = 0);

// Composites along the last axis.
Var dot(Var a, Var b);
Var norm(Var x);
Var cosine(Var a, Var b);

}  // namespace ad

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(Var a, double c);

/// Value-only sort (no gradient); argsort gives the permutation so callers
/// can gather the differentiable values in sorted order.
Tensor sort_values(const Tensor& x);
std::vector<std::size_t> argsort(std::span<const double> x);

}  // namespace trajaux
