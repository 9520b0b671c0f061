#include <doctest.h>

#include <algorithm>
#include <string>

#include "helpers.hpp"
#include "trajaux/registry.hpp"

using namespace trajaux;

namespace {

constexpr double kRtol = 1e-5;

TrajectoryBatch suite_batch(std::uint64_t seed) {
  return th::random_batch(4, 24, 16, seed, 16, {4, 8, 12, 16}, 8);
}

// Tiny gradients drown in round-off at small steps; sort-based losses hit
// kinks at large ones. A leaf passes if some step on the ladder agrees.
std::vector<LeafCheck> laddered(AuxLoss& loss, TrajectoryBatch& batch, const ToyLMHead* head, std::uint64_t seed,
                                GradCheckOptions o) {
  auto best = check_loss_gradients(loss, batch, head, seed, o);
  for (double h : {1e-4, 1e-5, 1e-7}) {
    if (th::worst(best) < kRtol) break;
    o.h_rel = h;
    const auto again = check_loss_gradients(loss, batch, head, seed, o);
    for (std::size_t i = 0; i < best.size(); ++i) best[i].rel_err = std::min(best[i].rel_err, again[i].rel_err);
  }
  return best;
}

}  // namespace

TEST_CASE("every catalogued loss passes finite differences") {
  for (const LossSpec& spec : loss_catalog()) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      CAPTURE(spec.id);
      CAPTURE(seed);
      auto loss = make_loss(spec.id, 16, seed);
      TrajectoryBatch batch = suite_batch(100 + seed);
      const ToyLMHead head = make_toy_head(16, 16, seed);
      GradCheckOptions o;
      o.seed = seed;
      o.budget = 96;
      const auto checks = laddered(*loss, batch, &head, 7 * seed, o);
      REQUIRE_FALSE(checks.empty());
      for (const auto& c : checks) {
        CAPTURE(c.name);
        CHECK(c.rel_err < kRtol);
      }
    }
  }
}

TEST_CASE("raw and margin-free variants") {
  const std::vector<std::pair<std::string, Hyper>> cases = {
      {"mstb_jfr", {{"raw", "1"}}},
      {"mstb_jfr", {{"scales", "1,4,7"}, {"margin", "0"}}},
      {"jfr", {{"margin", "0"}, {"min_len", "2"}}},
      {"local_jfr", {{"bank_k", "1"}}},
      {"dst_jfr", {{"layers", "8"}, {"final_layer", "16"}}},
      {"rig", {{"rank", "4"}}},
  };
  for (const auto& [id, hp] : cases) {
    CAPTURE(id);
    auto loss = make_loss(id, 16, 5, hp);
    TrajectoryBatch batch = suite_batch(9);
    const ToyLMHead head = make_toy_head(16, 16, 5);
    CHECK(th::worst(laddered(*loss, batch, &head, 3, {})) < kRtol);
  }
}
