#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "trajaux/loss.hpp"
#include "trajaux/rng.hpp"
#include "trajaux/traj_losses.hpp"

namespace trajaux {

/// Mean cosine over min(max_pairs, N(N-1)/2) distinct unordered pairs of
/// rows of `states` (N x D). All pairs are used when they fit.
double anisotropy(const Tensor& states, std::size_t max_pairs, Rng& rng);

struct CurvatureResult {
  double radians = 0.0;
  std::size_t rows = 0;              // rows that contributed
  std::size_t skipped_velocities = 0;
};

/// Mean over rows of the mean angle between consecutive velocities inside
/// each clipped span. Throws DataError when no row has a usable angle.
CurvatureResult curvature(const TrajectoryBatch& batch, const ClippedSpan& clip);

struct GradCosine {
  double value = 0.0;  // NaN when either side has zero norm
  bool nan = false;
};
GradCosine grad_cosine(std::span<const double> g_aux, std::span<const double> g_ce);

enum Bucket : std::size_t { kFront = 0, kMiddle = 1, kEnd = 2 };
/// front / middle / end by (rel + 0.5) / L against 1/3 and 2/3.
Bucket bucket_of(std::size_t rel, std::size_t L);

struct Attribution {
  std::array<double, 3> mean{};
  std::array<std::size_t, 3> count{};
};

/// Bucketed stencil energy of the Jacobi residual the given JFR-family loss
/// trains on. Throws ConfigError for any other loss.
Attribution attribution(const TrajectoryBatch& batch, const ClippedSpan& clip, const AuxLoss& loss);

struct ActiveInertThresholds {
  double rho_max = 0.2;
  double eps_em = 2.5;  // percentage points
};
bool active_inert(double delta_g, double rho, double delta_em, const ActiveInertThresholds& th = {});

struct DiagnosticsReport {
  double anisotropy = 0.0;
  CurvatureResult curvature;
  std::optional<GradCosine> grad_cosine;  // needs head and labels
  std::optional<Attribution> attribution; // JFR family only
  Flags flags;
};

/// All diagnostics for one batch. The gradient cosine compares the loss's
/// and the toy CE's gradients with respect to the hidden states.
DiagnosticsReport diagnose(const TrajectoryBatch& batch, AuxLoss& loss, const ToyLMHead* head,
                           std::uint64_t seed, std::size_t max_pairs = 2000);

}  // namespace trajaux
