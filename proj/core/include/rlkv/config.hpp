#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlkv/grpo.hpp"
#include "rlkv/model.hpp"
#include "rlkv/sft.hpp"

namespace rlkv {

// Dataset sizes and difficulty ranges for every split the pipeline generates.
struct TaskGenConfig {
  int value_modulus = 10;
  int sft_train = 2048;
  int sft_heldout = 256;
  int sft_min_steps = 1;
  int sft_max_steps = 3;
  int pool = 512;  // candidate pool fed to the curation filter
  int pool_min_steps = 1;
  int pool_max_steps = 4;
  int distill_target = 256;
  int eval_heldout = 200;
  int eval_min_steps = 2;
  int eval_max_steps = 4;

  void validate() const;
};

// Deployment-time evaluation knobs: compressed-head geometry, the sparsity
// sweep, and the control conditions.
struct EvalConfig {
  int max_new = 48;
  int sink = 4;
  int local = 8;
  std::vector<float> sparsity_grid{0.2f, 0.4f, 0.6f, 0.8f};
  int random_seeds = 5;
  float mask_fraction = 0.25f;
  int score_evict_window = 8;

  void validate() const;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  ModelConfig model;
  TaskGenConfig tasks;
  SftConfig sft;
  GrpoConfig rl;
  EvalConfig eval;

  void validate() const;
};

// Strict parse: unknown keys anywhere are rejected with the offending key and
// its location; missing keys fall back to the defaults above. Seeds for the
// sft/rl stages are derived from the global seed, never set directly.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig read_experiment_config(const std::string& path);

// Canonical full echo of a resolved config; reparsing it reproduces the same
// configuration, and runs archive it next to their artifacts.
std::string serialize_experiment_config(const ExperimentConfig& config);

}  // namespace rlkv
