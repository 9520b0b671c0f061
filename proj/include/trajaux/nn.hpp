#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "trajaux/autodiff.hpp"
#include "trajaux/rng.hpp"
#include "trajaux/tensor.hpp"

namespace trajaux {

/// A named, mutable parameter tensor owned by some head state.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  bool frozen = false;
};

struct Linear {
  Tensor W;  // out x in
  Tensor b;  // out, unused when !has_bias
  bool has_bias = true;

  std::size_t in() const { return W.dim(1); }
  std::size_t out() const { return W.dim(0); }
};

/// Gaussian init with std `scale` (default in^{-1/2}); zero_init gives W = 0.
Linear make_linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true,
                   bool zero_init = false, double scale = -1.0);

/// x W^T + b for x of shape N x in.
Var apply(Tape& tape, const Linear& l, Var x, const std::string& name, bool frozen = false);

/// Stack of Linear layers with exact GELU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;
};

Mlp make_mlp(const std::vector<std::size_t>& widths, Rng& rng, bool zero_last = false);
Var apply(Tape& tape, const Mlp& m, Var x, const std::string& name, bool frozen = false);

void collect_params(Linear& l, const std::string& name, bool frozen, std::vector<ParamRef>& out);
void collect_params(Mlp& m, const std::string& name, bool frozen, std::vector<ParamRef>& out);

/// target <- tau * target + (1 - tau) * online, parameter-wise.
void ema_update(Mlp& target, const Mlp& online, double tau);

}  // namespace trajaux
