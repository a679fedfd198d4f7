#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rlkv/model.hpp"
#include "rlkv/tasks.hpp"
#include "rlkv/tensor.hpp"

namespace rlkv {

// The clipped-surrogate ratio can be formed per token (averaged over the
// sequence, the default: stable) or as one sequence-level ratio (faithful to
// the objective as written, numerically explosive on long outputs).
enum class RatioMode { PerToken, Sequence };

struct GrpoConfig {
  int group_size = 4;
  int groups_per_step = 8;     // queries sampled per optimizer step
  int steps = 200;
  float clip_epsilon = 0.2f;
  float base_penalty = 1e-3f;  // sparsity pressure scale
  float reward_cutoff = 0.5f;  // mean reward a group must clear before the penalty engages
  float adapter_lr = 0.01f;
  float temperature = 1.0f;
  int max_new = 48;
  std::uint64_t seed = 0;
  RatioMode ratio_mode = RatioMode::PerToken;
  // when false the penalty weight is base_penalty on every step, with no
  // reward cutoff and no exponential scaling (ablation baseline)
  bool adaptive_penalty = true;

  void validate() const;  // throws std::invalid_argument
};

// One query with its sampled completions. Log-probabilities are recorded at
// sampling time under the temperature-scaled distribution, so a ratio against
// them is exactly 1 until the adapters move.
struct RolloutGroup {
  std::vector<int> query;
  std::vector<std::vector<int>> outputs;
  std::vector<std::vector<float>> old_logprobs;
  std::vector<float> rewards;
  std::vector<double> advantages;
  double mean_reward = 0.0;
};

// Group-normalized advantages using the population standard deviation.
// Degenerate groups (std below 1e-6) get all-zero advantages. Length >= 2.
std::vector<double> compute_advantages(std::span<const float> rewards);

// Effective penalty weight: zero at or below the cutoff, then scaled by
// exp(mean_reward) - 1 so pressure grows as the group gets more reliable.
double adaptive_beta(double mean_reward, double cutoff, double base_penalty);

// Samples group_size completions of the instance's question under the current
// adapters and scores them. base_seed separates this group's draws from every
// other group in the run.
RolloutGroup rollout_group(const task::TaskInstance& instance, const Weights& weights,
                           const GatingAdapters& adapters, const GrpoConfig& config,
                           std::uint64_t base_seed);

// Clipped-surrogate reward term for one group, averaged over tokens then over
// the group. Differentiable in the adapters; model weights stay out of the
// optimizer. Zero-advantage outputs contribute exactly zero and are skipped.
Tensor grpo_objective(const RolloutGroup& group, const GatingAdapters& adapters,
                      const Weights& weights, const GrpoConfig& config);

// Mean |alpha| penalty: beta_eff * ||alpha||_1 / n_entries.
Tensor l1_term(const GatingAdapters& adapters, float beta_eff);

// Full quantity rl_step maximizes: mean group objective minus the penalty at
// the batch-mean effective weight. beta_eff_out receives that mean if given.
Tensor rl_total_objective(std::span<const RolloutGroup> groups, const GatingAdapters& adapters,
                          const Weights& weights, const GrpoConfig& config,
                          double* beta_eff_out = nullptr);

struct RlStepMetrics {
  int step = 0;
  double mean_reward = 0.0;       // batch mean of group means
  float alpha_mean = 0.0f;        // measured before the update
  float alpha_sparsity = 0.0f;    // share of entries below 0.05, before the update
  double beta_eff = 0.0;
  double objective = 0.0;         // value being maximized, before the update
};

// One ascent step on the adapters: build the total objective, backpropagate,
// take a plain gradient step of size adapter_lr, project alpha back into
// [0, 1]. Deliberately not a normalizing optimizer: the penalty schedule acts
// through the magnitude of its gradient, and per-coordinate rescaling of the
// Adam family flattens exactly that signal.
RlStepMetrics rl_step(std::span<const RolloutGroup> groups, GatingAdapters& adapters,
                      const Weights& weights, const GrpoConfig& config);

using MetricsSink = std::function<void(const RlStepMetrics&)>;

// Full training loop: each step samples groups_per_step queries from the
// dataset, rolls out fresh groups at the current adapters, and updates once.
// Model weights must be frozen (set_trainable(false)) before entry.
std::vector<RlStepMetrics> run_rl(const std::vector<task::TaskInstance>& dataset,
                                  const Weights& weights, GatingAdapters& adapters,
                                  const GrpoConfig& config, const MetricsSink& sink = nullptr);

// Curriculum curation for the RL pool: greedy-decode every instance with the
// full cache, keep the solved ones, then draw per difficulty bucket according
// to bucket_weights (largest-remainder quotas; shortfall in one bucket is
// redistributed over the others proportionally).
struct DistillResult {
  std::vector<task::TaskInstance> instances;
  std::vector<int> bucket_counts;  // one per weight
  int solvable_count = 0;
  bool underfilled = false;  // fewer solvable instances than target_count
};

std::vector<double> default_bucket_weights();  // {0.2, 0.2, 1/3, 0.8/3}

// Largest-remainder split of target over the weights, then capped by per-
// bucket availability with the shortfall pushed into buckets that still have
// room (again weight-proportionally). Requires sum(available) >= target.
std::vector<long long> bucket_quotas(long long target, std::span<const double> weights,
                                     std::span<const long long> available);

DistillResult self_distill_filter(const std::vector<task::TaskInstance>& pool,
                                  const Weights& weights, std::span<const double> bucket_weights,
                                  int target_count, std::uint64_t seed, int max_new = 48);

}  // namespace rlkv
