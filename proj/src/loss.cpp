#include "trajaux/loss.hpp"

#include <algorithm>
#include <cmath>

#include "trajaux/error.hpp"
#include "trajaux/rng.hpp"

namespace trajaux {

LossInput make_input(Tape& tape, AuxLoss& loss, const TrajectoryBatch& batch, const ToyLMHead* head,
                     std::uint64_t seed) {
  if (loss.needs_head() && !head) throw ConfigError(loss.id() + " needs an LM head");
  if (loss.needs_labels() && !batch.has_labels()) throw DataError(loss.id() + " needs labels");
  LossInput in;
  in.batch = &batch;
  in.clip = eos_clip(batch, loss.margin, loss.min_len);
  in.hidden = tape.leaf("hidden", batch.hidden);
  if (loss.needs_layers()) {
    for (const auto& [layer, t] : batch.layer_stack) {
      in.layers[layer] = tape.leaf("layer." + std::to_string(layer), t);
    }
  }
  for (const ParamRef& p : loss.parameters()) tape.leaf(p.name, *p.value);
  in.head = head;
  in.seed = seed;
  return in;
}

DualValue evaluate(AuxLoss& loss, const TrajectoryBatch& batch, const ToyLMHead* head,
                   std::uint64_t seed) {
  Tape tape;
  LossInput in = make_input(tape, loss, batch, head, seed);
  LossOutput out = loss.forward(tape, in);
  DualValue dv = tape.backward(out.value);
  dv.flags = std::move(out.flags);
  if (!std::isfinite(dv.value)) throw NumericalError(loss.id() + ": non-finite loss value");
  return dv;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<LeafCheck> check_gradients(const std::function<Var(Tape&)>& build,
                                       const std::map<std::string, Tensor*>& leaves,
                                       const GradCheckOptions& opts) {
  Tape t0;
  Var root = build(t0);
  const DualValue dv = t0.backward(root);
  const std::vector<Tensor> sg_log = t0.stop_gradient_log();

  auto eval = [&]() {
    Tape t;
    t.replay_stop_gradients(sg_log);
    return build(t).item();
  };

  Rng rng(Rng::mix(opts.seed, 0xfd));
  std::vector<LeafCheck> out;
  for (const auto& [name, tensor] : leaves) {
    const Tensor& analytic = dv.grad(name);
    Tensor& x = *tensor;
    const std::size_t n = x.size();

    std::vector<std::size_t> coords;
    if (opts.budget == 0 || n <= opts.budget) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      // Half where the analytic gradient is live, half anywhere.
      std::vector<std::size_t> live;
      for (std::size_t i = 0; i < n; ++i) {
        if (analytic[i] != 0.0) live.push_back(i);
      }
      const std::size_t want_live = std::min(live.size(), opts.budget / 2);
      std::vector<bool> taken(n, false);
      if (want_live > 0) {
        for (std::size_t k : rng.sorted_sample(0, live.size(), want_live)) taken[live[k]] = true;
      }
      std::size_t have = want_live;
      while (have < opts.budget) {
        const std::size_t i = rng.index(n);
        if (!taken[i]) {
          taken[i] = true;
          ++have;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) coords.push_back(i);
      }
    }

    double max_err = 0.0;
    for (std::size_t i : coords) {
      const double x0 = x[i];
      const double h = opts.h_rel * (1.0 + std::abs(x0));
      x[i] = x0 + h;
      const double fp = eval();
      x[i] = x0 - h;
      const double fm = eval();
      x[i] = x0;
      // Divide by the realised step so rounding in x0 +- h does not bias the slope.
      const double fd = (fp - fm) / ((x0 + h) - (x0 - h));
      max_err = std::max(max_err, std::abs(fd - analytic[i]));
    }
    LeafCheck lc;
    lc.name = name;
    lc.grad_scale = max_abs(analytic);
    lc.rel_err = max_err / std::max(lc.grad_scale, opts.floor);
    lc.coords = coords.size();
    out.push_back(lc);
  }
  return out;
}

std::vector<LeafCheck> check_loss_gradients(AuxLoss& loss, TrajectoryBatch& batch, const ToyLMHead* head,
                                            std::uint64_t seed, const GradCheckOptions& opts) {
  std::map<std::string, Tensor*> leaves{{"hidden", &batch.hidden}};
  if (loss.needs_layers()) {
    for (auto& [layer, t] : batch.layer_stack) leaves["layer." + std::to_string(layer)] = &t;
  }
  for (const ParamRef& p : loss.parameters()) {
    if (!p.frozen) leaves[p.name] = p.value;
  }
  const auto build = [&](Tape& tape) {
    LossInput in = make_input(tape, loss, batch, head, seed);
    return loss.forward(tape, in).value;
  };
  return check_gradients(build, leaves, opts);
}

}  // namespace trajaux
