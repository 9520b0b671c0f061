#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "trajaux/loss.hpp"
#include "trajaux/rng.hpp"
#include "trajaux/trajectory.hpp"

namespace th {

using namespace trajaux;

inline Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, scale));
}

/// Gaussian hidden states with random spans of at least min_len tokens,
/// prompt spans, next-token labels in [0, V) and an optional layer stack.
inline TrajectoryBatch random_batch(std::size_t B, std::size_t S, std::size_t D, std::uint64_t seed,
                                    std::size_t V = 16, std::vector<int> layers = {}, std::size_t min_len = 10) {
  Rng rng(seed);
  TrajectoryBatch b;
  b.hidden = randn({B, S, D}, rng);
  b.labels.assign(B * S, kIgnoreLabel);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t L = min_len + rng.index(S - min_len);
    const std::size_t lo = rng.index(S - L + 1);
    b.spans.push_back({lo, lo + L});
    b.prompt_spans.push_back({0, lo});
    for (std::size_t t = lo; t < lo + L; ++t) b.labels[i * S + t] = static_cast<int>(rng.index(V));
  }
  for (int l : layers) b.layer_stack.emplace(l, randn({B, S, D}, rng));
  return b;
}

/// A batch holding the given per-row trajectories (each S x D, row-major)
/// with the given spans.
inline TrajectoryBatch batch_from(std::size_t S, std::size_t D, const std::vector<std::vector<double>>& rows,
                                  const std::vector<Span>& spans) {
  TrajectoryBatch b;
  std::vector<double> all;
  for (const auto& r : rows) all.insert(all.end(), r.begin(), r.end());
  b.hidden = Tensor({rows.size(), S, D}, std::move(all));
  b.spans = spans;
  return b;
}

inline double worst(const std::vector<LeafCheck>& checks) {
  double w = 0.0;
  for (const auto& c : checks) w = std::max(w, c.rel_err);
  return w;
}

/// Random LM head, hidden state and gold label with the margin hinge active.
struct ConeFixture {
  ToyLMHead head;
  std::vector<double> h;
  int y = 0;
  double m = 1.0;
};

inline ConeFixture cone_fixture(Rng& rng) {
  ConeFixture f;
  const std::size_t V = 2 + rng.index(63), D = 16 + rng.index(17);
  f.head.W = randn({V, D}, rng, 1.0 / std::sqrt(static_cast<double>(D)));
  f.m = 0.5 + rng.uniform();
  for (;;) {
    f.h = rng.normal_vector(D, 0.5 + 2.0 * rng.uniform());
    f.y = static_cast<int>(rng.index(V));
    const Tensor z = head_logits(f.head, Tensor({1, D}, f.h));
    double best = -INFINITY;
    for (std::size_t v = 0; v < V; ++v)
      if (static_cast<int>(v) != f.y) best = std::max(best, z[v]);
    if (f.m - z[static_cast<std::size_t>(f.y)] + best > 0.0) return f;
  }
}

inline bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= atol + rtol * std::abs(b);
}

}  // namespace th
