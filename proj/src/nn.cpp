#include "trajaux/nn.hpp"

#include <cmath>

#include "trajaux/error.hpp"

namespace trajaux {

Linear make_linear(std::size_t in, std::size_t out, Rng& rng, bool bias, bool zero_init,
                   double scale) {
  Linear l;
  if (zero_init) {
    l.W = Tensor(Shape{out, in});
  } else {
    const double s = scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(in));
    l.W = Tensor(Shape{out, in}, rng.normal_vector(out * in, s));
  }
  l.b = Tensor(Shape{out});
  l.has_bias = bias;
  return l;
}

Var apply(Tape& tape, const Linear& l, Var x, const std::string& name, bool frozen) {
  Var W = tape.param(name + ".W", l.W, frozen);
  Var y = ad::matmul(x, ad::transpose(W));
  if (!l.has_bias) return y;
  return ad::add(y, tape.param(name + ".b", l.b, frozen));
}

Mlp make_mlp(const std::vector<std::size_t>& widths, Rng& rng, bool zero_last) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(make_linear(widths[i], widths[i + 1], rng, true, last && zero_last));
  }
  return m;
}

Var apply(Tape& tape, const Mlp& m, Var x, const std::string& name, bool frozen) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = apply(tape, m.layers[i], x, name + "." + std::to_string(i), frozen);
    if (i + 1 < m.layers.size()) x = ad::gelu(x);
  }
  return x;
}

void collect_params(Linear& l, const std::string& name, bool frozen, std::vector<ParamRef>& out) {
  out.push_back({name + ".W", &l.W, frozen});
  if (l.has_bias) out.push_back({name + ".b", &l.b, frozen});
}

void collect_params(Mlp& m, const std::string& name, bool frozen, std::vector<ParamRef>& out) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    collect_params(m.layers[i], name + "." + std::to_string(i), frozen, out);
  }
}

void ema_update(Mlp& target, const Mlp& online, double tau) {
  if (target.layers.size() != online.layers.size()) throw ShapeError("ema_update: depth mismatch");
  auto blend = [tau](Tensor& t, const Tensor& o) {
    if (t.shape() != o.shape()) throw ShapeError("ema_update: parameter shape mismatch");
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = tau * t[i] + (1.0 - tau) * o[i];
  };
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    blend(target.layers[i].W, online.layers[i].W);
    blend(target.layers[i].b, online.layers[i].b);
  }
}

}  // namespace trajaux
