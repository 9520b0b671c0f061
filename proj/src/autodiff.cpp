#include "trajaux/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "trajaux/error.hpp"

namespace trajaux {

// ---------------------------------------------------------------------------
// Var / DualValue / Tape

const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value_of(id_);
}

const Tensor& DualValue::grad(std::string_view leaf) const {
  auto it = grads.find(leaf);
  if (it == grads.end()) throw Error("no gradient recorded for leaf '" + std::string(leaf) + "'");
  return it->second;
}

Var Tape::leaf(const std::string& name, const Tensor& value) {
  for (const auto& [n, id] : leaves_) {
    if (n == name) return Var(this, id);
  }
  nodes_.push_back(Node{value, {}, {}, true});
  const std::size_t id = nodes_.size() - 1;
  leaves_.emplace_back(name, id);
  return Var(this, id);
}

Var Tape::param(const std::string& name, const Tensor& value, bool frozen) {
  Var l = leaf(name, value);
  return frozen ? stop_gradient(l) : l;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::stop_gradient(Var x) {
  Tensor v;
  if (sg_replay_) {
    if (sg_cursor_ >= sg_replay_->size()) {
      throw Error("stop-gradient replay exhausted: evaluation is not structurally repeatable");
    }
    v = (*sg_replay_)[sg_cursor_++];
    if (v.shape() != x.shape()) {
      throw ShapeError("stop-gradient replay shape " + shape_str(v.shape()) + " vs live " +
                       shape_str(x.shape()));
    }
  } else {
    v = x.value();
  }
  sg_log_.push_back(v);
  return constant(std::move(v));
}

bool Tape::has_leaf(std::string_view name) const {
  return std::any_of(leaves_.begin(), leaves_.end(), [&](const auto& p) { return p.first == name; });
}

Var Tape::leaf_var(std::string_view name) const {
  for (const auto& [n, id] : leaves_) {
    if (n == name) return Var(const_cast<Tape*>(this), id);
  }
  throw Error("unknown leaf '" + std::string(name) + "'");
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  node.parents.reserve(parents.size());
  for (const Var& p : parents) {
    if (&p.tape() != this) throw Error("Var from a different tape");
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

DualValue Tape::backward(Var root) {
  if (&root.tape() != this) throw Error("backward: root belongs to another tape");
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[root.id()] = Tensor(root.shape(), 1.0);
  std::vector<Tensor*> slots;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!grads[id] || !node.requires_grad || !node.backward) continue;
    slots.assign(node.parents.size(), nullptr);
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::size_t p = node.parents[k];
      if (!nodes_[p].requires_grad) continue;
      if (!grads[p]) grads[p] = Tensor(nodes_[p].value.shape());
      slots[k] = &*grads[p];
    }
    node.backward(*grads[id], slots);
  }
  DualValue out;
  out.value = root.item();
  for (const auto& [name, id] : leaves_) {
    out.grads.emplace(name, grads[id] ? std::move(*grads[id]) : Tensor(nodes_[id].value.shape()));
  }
  return out;
}

void Tape::reset() {
  nodes_.clear();
  leaves_.clear();
  sg_log_.clear();
  sg_replay_.reset();
  sg_cursor_ = 0;
}

void Tape::replay_stop_gradients(std::vector<Tensor> values) {
  sg_replay_ = std::move(values);
  sg_cursor_ = 0;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

std::vector<std::size_t> natural_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = natural_strides(a);
  const auto sb = natural_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t oa = r - a.size(), ob = r - b.size();
    const std::size_t da = i < oa ? 1 : a[i - oa];
    const std::size_t db = i < ob ? 1 : b[i - ob];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
    }
    p.out[i] = (da == 1) ? db : da;
    if (i >= oa && !(da == 1 && p.out[i] != 1)) p.stride_a[i] = sa[i - oa];
    if (i >= ob && !(db == 1 && p.out[i] != 1)) p.stride_b[i] = sb[i - ob];
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t n = shape_numel(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& s, int axis, bool keepdims, const char* op) {
  const int r = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(s));
  }
  AxisSplit sp;
  for (int i = 0; i < ax; ++i) sp.outer *= s[i];
  sp.n = s[ax];
  for (int i = ax + 1; i < r; ++i) sp.inner *= s[i];
  for (int i = 0; i < r; ++i) {
    if (i != ax) {
      sp.reduced.push_back(s[i]);
    } else if (keepdims) {
      sp.reduced.push_back(1);
    }
  }
  return sp;
}

// Elementwise unary op. `deriv(x, y)` returns dy/dx given input and output.
template <class Fwd, class Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t self = tape.size();
  const Tensor* px = &xv;
  return tape.record(std::move(out), {x},
                     [px, &tape, self, deriv](const Tensor& g, std::span<Tensor* const> pg) {
                       const Tensor& y = tape.value_of(self);
                       Tensor& gx = *pg[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[i] += g[i] * deriv((*px)[i], y[i]);
                       }
                     });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

// ---------------------------------------------------------------------------
// Binary elementwise

namespace ad {

namespace {

template <class Fwd, class Back>
Var binary(Var a, Var b, const char* op, Fwd fwd, Back back) {
  Tape& tape = a.tape();
  if (&b.tape() != &tape) throw Error(std::string(op) + ": operands on different tapes");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  BroadcastPlan plan = plan_broadcast(av.shape(), bv.shape(), op);
  Tensor out(plan.out);
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(av[ia], bv[ib]);
  });
  const Tensor* pa = &av;
  const Tensor* pb = &bv;
  return tape.record(std::move(out), {a, b},
                     [plan = std::move(plan), pa, pb, back](const Tensor& g,
                                                            std::span<Tensor* const> pg) {
                       Tensor* ga = pg[0];
                       Tensor* gb = pg[1];
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         double da = 0.0, db = 0.0;
                         back((*pa)[ia], (*pb)[ib], da, db);
                         if (ga) (*ga)[ia] += g[o] * da;
                         if (gb) (*gb)[ib] += g[o] * db;
                       });
                     });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double& da, double& db) {
        da = 1.0;
        db = 1.0;
      });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double& da, double& db) {
        da = 1.0;
        db = -1.0;
      });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double& da, double& db) {
        da = y;
        db = x;
      });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double& da, double& db) {
        da = 1.0 / y;
        db = -x / (y * y);
      });
}

// ---------------------------------------------------------------------------
// Unary

Var neg(Var x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var scale(Var x, double c) {
  return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var shift(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(Var x) {
  return unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var abs(Var x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sigmoid(Var x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  return unary(
      x, [](double v) { return v * norm_cdf(v); },
      [](double v, double) { return norm_cdf(v) + v * norm_pdf(v); });
}

Var gelu_prime(Var x) {
  return unary(
      x, [](double v) { return norm_cdf(v) + v * norm_pdf(v); },
      [](double v, double) { return norm_pdf(v) * (2.0 - v * v); });
}

Var arccos(Var x) {
  constexpr double kSlack = 1e-12;
  for (double v : x.value().data()) {
    if (!(std::abs(v) <= 1.0 + kSlack)) {
      throw NumericalError("arccos: input " + std::to_string(v) + " outside [-1, 1]");
    }
  }
  return unary(
      x, [](double v) { return std::acos(std::clamp(v, -1.0, 1.0)); },
      [](double v, double) {
        const double c = std::clamp(v, -1.0, 1.0);
        const double s = 1.0 - c * c;
        // Subgradient 0 at the clamped endpoints.
        return s > 0.0 ? -1.0 / std::sqrt(s) : 0.0;
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return x.tape().record(Tensor::scalar(s), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    const double gv = g[0];
    for (double& v : pg[0]->data()) v += gv;
  });
}

Var sum(Var x, int axis, bool keepdims) {
  const Tensor& xv = x.value();
  AxisSplit sp = split_axis(xv.shape(), axis, keepdims, "sum");
  Tensor out(sp.reduced);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.n + k) * sp.inner + i];
  return x.tape().record(std::move(out), {x}, [sp](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean(Var x, int axis, bool keepdims) {
  AxisSplit sp = split_axis(x.shape(), axis, keepdims, "mean");
  return scale(sum(x, axis, keepdims), 1.0 / static_cast<double>(sp.n));
}

Var max(Var x, int axis, bool keepdims) {
  const Tensor& xv = x.value();
  AxisSplit sp = split_axis(xv.shape(), axis, keepdims, "max");
  if (sp.n == 0) throw ShapeError("max over an empty axis");
  Tensor out(sp.reduced);
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = xv[o * sp.n * sp.inner + i];
      for (std::size_t k = 1; k < sp.n; ++k) {
        const double v = xv[(o * sp.n + k) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
    }
  return x.tape().record(std::move(out), {x},
                         [sp, arg = std::move(arg)](const Tensor& g, std::span<Tensor* const> pg) {
                           Tensor& gx = *pg[0];
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t i = 0; i < sp.inner; ++i) {
                               const std::size_t j = o * sp.inner + i;
                               gx[(o * sp.n + arg[j]) * sp.inner + i] += g[j];
                             }
                         });
}

namespace {

// Softmax of x/temperature along the split axis, written into `out`.
void softmax_into(const Tensor& xv, const AxisSplit& sp, double temperature, Tensor& out,
                  std::vector<double>* lse) {
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -INFINITY;
      for (std::size_t k = 0; k < sp.n; ++k)
        m = std::max(m, xv[(o * sp.n + k) * sp.inner + i] / temperature);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t j = (o * sp.n + k) * sp.inner + i;
        out[j] = std::exp(xv[j] / temperature - m);
        z += out[j];
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[(o * sp.n + k) * sp.inner + i] /= z;
      if (lse) (*lse)[o * sp.inner + i] = m + std::log(z);
    }
}

}  // namespace

Var logsumexp(Var x, int axis, bool keepdims) {
  const Tensor& xv = x.value();
  AxisSplit sp = split_axis(xv.shape(), axis, keepdims, "logsumexp");
  Tensor probs(xv.shape());
  std::vector<double> lse(sp.outer * sp.inner);
  softmax_into(xv, sp, 1.0, probs, &lse);
  return x.tape().record(Tensor(sp.reduced, std::move(lse)), {x},
                         [sp, probs = std::move(probs)](const Tensor& g, std::span<Tensor* const> pg) {
                           Tensor& gx = *pg[0];
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t k = 0; k < sp.n; ++k)
                               for (std::size_t i = 0; i < sp.inner; ++i) {
                                 const std::size_t j = (o * sp.n + k) * sp.inner + i;
                                 gx[j] += g[o * sp.inner + i] * probs[j];
                               }
                         });
}

Var softmax(Var x, int axis, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax: temperature must be positive");
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  AxisSplit sp = split_axis(xv.shape(), axis, true, "softmax");
  Tensor out(xv.shape());
  softmax_into(xv, sp, temperature, out, nullptr);
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x},
                     [sp, temperature, &tape, self](const Tensor& g, std::span<Tensor* const> pg) {
                       const Tensor& y = tape.value_of(self);
                       Tensor& gx = *pg[0];
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           double dotgy = 0.0;
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t j = (o * sp.n + k) * sp.inner + i;
                             dotgy += g[j] * y[j];
                           }
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t j = (o * sp.n + k) * sp.inner + i;
                             gx[j] += y[j] * (g[j] - dotgy) / temperature;
                           }
                         }
                     });
}

Var log_softmax(Var x, int axis, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("log_softmax: temperature must be positive");
  const Tensor& xv = x.value();
  AxisSplit sp = split_axis(xv.shape(), axis, true, "log_softmax");
  Tensor probs(xv.shape());
  std::vector<double> lse(sp.outer * sp.inner);
  softmax_into(xv, sp, temperature, probs, &lse);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t j = (o * sp.n + k) * sp.inner + i;
        out[j] = xv[j] / temperature - lse[o * sp.inner + i];
      }
  return x.tape().record(
      std::move(out), {x},
      [sp, temperature, probs = std::move(probs)](const Tensor& g, std::span<Tensor* const> pg) {
        Tensor& gx = *pg[0];
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            double gs = 0.0;
            for (std::size_t k = 0; k < sp.n; ++k) gs += g[(o * sp.n + k) * sp.inner + i];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = (o * sp.n + k) * sp.inner + i;
              gx[j] += (g[j] - probs[j] * gs) / temperature;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Structural

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  const Tensor* pa = &av;
  const Tensor* pb = &bv;
  return a.tape().record(std::move(out), {a, b},
                         [pa, pb, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                           if (Tensor* ga = pg[0]) {
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 double s = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * (*pb)[p * n + j];
                                 (*ga)[i * k + p] += s;
                               }
                           }
                           if (Tensor* gb = pg[1]) {
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double aip = (*pa)[i * k + p];
                                 if (aip == 0.0) continue;
                                 for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                               }
                           }
                         });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return a.tape().record(std::move(out), {a}, [m, n](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& gx = *pg[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var take_rows(Var x, std::span<const std::size_t> indices) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("take_rows: scalar input");
  const std::size_t width = xv.rank() == 1 ? 1 : xv.shape().back();
  const std::size_t rows = width == 0 ? 0 : xv.size() / width;
  for (std::size_t r : indices) {
    if (r >= rows) {
      throw ShapeError("take_rows: row " + std::to_string(r) + " out of range for shape " +
                       shape_str(xv.shape()));
    }
  }
  Shape out_shape = xv.rank() == 1 ? Shape{indices.size()} : Shape{indices.size(), width};
  Tensor out(out_shape);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(xv.data().begin() + indices[i] * width, width, out.data().begin() + i * width);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape().record(std::move(out), {x},
                         [idx = std::move(idx), width](const Tensor& g, std::span<Tensor* const> pg) {
                           Tensor& gx = *pg[0];
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t c = 0; c < width; ++c)
                               gx[idx[i] * width + c] += g[i * width + c];
                         });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& tape = parts.front().tape();
  const Shape& s0 = parts.front().shape();
  const int r = static_cast<int>(s0.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("concat: bad axis for shape " + shape_str(s0));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s0[i];
  for (int i = ax + 1; i < r; ++i) inner *= s0[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = static_cast<int>(s.size()) == r;
    for (int i = 0; ok && i < r; ++i) ok = (i == ax) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
    lens.push_back(s[ax]);
    total += s[ax];
  }
  Shape out_shape = s0;
  out_shape[ax] = total;
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data().begin() + o * lens[p] * inner, lens[p] * inner,
                  out.data().begin() + (o * total + offset) * inner);
    offset += lens[p];
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return tape.record(std::move(out), parents,
                     [lens, outer, inner, total](const Tensor& g, std::span<Tensor* const> pg) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < lens.size(); ++p) {
                         if (Tensor* gp = pg[p]) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t c = 0; c < lens[p] * inner; ++c)
                               (*gp)[o * lens[p] * inner + c] += g[(o * total + off) * inner + c];
                         }
                         off += lens[p];
                       }
                     });
}

Var dot(Var a, Var b) { return sum(mul(a, b), -1); }

Var norm(Var x) { return sqrt(dot(x, x)); }

Var cosine(Var a, Var b) { return div(dot(a, b), mul(sqrt(dot(a, a)), sqrt(dot(b, b)))); }

}  // namespace ad

// ---------------------------------------------------------------------------
// Operators

Var operator+(Var a, Var b) { return ad::add(a, b); }
Var operator-(Var a, Var b) { return ad::sub(a, b); }
Var operator*(Var a, Var b) { return ad::mul(a, b); }
Var operator/(Var a, Var b) { return ad::div(a, b); }
Var operator-(Var a) { return ad::neg(a); }
Var operator+(Var a, double c) { return ad::shift(a, c); }
Var operator+(double c, Var a) { return ad::shift(a, c); }
Var operator-(Var a, double c) { return ad::shift(a, -c); }
Var operator-(double c, Var a) { return ad::shift(ad::neg(a), c); }
Var operator*(Var a, double c) { return ad::scale(a, c); }
Var operator*(double c, Var a) { return ad::scale(a, c); }
Var operator/(Var a, double c) { return ad::scale(a, 1.0 / c); }

Tensor sort_values(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  std::sort(v.begin(), v.end());
  return Tensor(x.shape(), std::move(v));
}

std::vector<std::size_t> argsort(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  return idx;
}

}  // namespace trajaux
