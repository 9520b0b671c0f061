#pragma once

// Experiment driver behind the `trajaux` executable. Everything here is
// callable in-process; the executable only forwards argv.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajaux/registry.hpp"
#include "trajaux/schedule.hpp"
#include "trajaux/trajectory.hpp"

namespace trajaux::cli {

struct ExperimentConfig {
  std::string loss = "jfr";
  Hyper hyper;
  ScheduleConfig schedule;
  std::optional<double> lambda0;  // unset: demo preset
  SynthConfig synth;
  bool noise_set = false;
  std::vector<std::uint64_t> seeds{0};
  std::size_t steps = 200;
  std::optional<double> lr;  // unset: demo preset
  std::string batch_path;    // load instead of synthesising
  std::string out;
  std::string format = "text";
  bool timestamp = true;

  // stats
  std::vector<std::string> family;  // empty: every non-baseline variant
  double alpha = 0.10;
  std::string baseline;
  std::string metric = "exact";

  // fisher-check
  std::vector<double> scales{1.0, 0.5, 0.25, 0.125, 0.0625};

  /// Throws ConfigError: unknown loss, repeated seeds, bad format.
  void validate() const;
};

/// Applies flat "section.key" entries (INI sections or nested JSON objects).
/// Unknown keys raise ConfigError.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);
void load_config_file(ExperimentConfig& cfg, const std::string& path);

nlohmann::json config_json(const ExperimentConfig& cfg);

/// Batch for one seed: the file when batch_path is set, else synth_batch
/// with cfg.synth and the seed. The head is make_toy_head(V, D, seed).
struct Fixture {
  ToyLMHead head;
  TrajectoryBatch batch;
};
Fixture make_fixture(const ExperimentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Toy descent

struct DemoPreset {
  double lr = 0.05;
  double lambda0 = 1.0;
  double noise = 0.0;  // synth noise unless the config sets one
};
/// Step size and weight under which each loss's auxiliary term visibly
/// descends in a couple of hundred steps.
DemoPreset demo_preset(const std::string& loss_id);

struct StepRecord {
  double lm = 0.0, aux = 0.0, lambda = 0.0, total = 0.0;
};

struct DemoResult {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;  // one per descent step, values before the update
  double aux_final = 0.0;         // after the last update
  double lm_final = 0.0;
  bool params_diverged_from_target = false;  // byol: online != target after step 1
  std::size_t ema_ticks = 0;
  nlohmann::json diagnostics;
};

/// Plain gradient descent on hidden states (and layer stacks) plus the
/// loss's trainable parameters against lm + lambda(t) aux. Throws
/// NumericalError with a state dump on a non-finite value.
DemoResult run_demo(const ExperimentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

/// Full command line, argv[0] included. Returns the process exit code:
/// 0 ok, 2 config, 3 data, 4 numerical, 1 anything else.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trajaux::cli
