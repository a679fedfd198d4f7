#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rlkv/kv_cache.hpp"
#include "rlkv/model.hpp"
#include "rlkv/optim.hpp"
#include "rlkv/tasks.hpp"
#include "rlkv/tensor.hpp"

namespace rlkv {

// Supervised warm-up on gold chains. The loss covers only the generated
// portion of each sequence; question tokens never contribute.
struct SftConfig {
  int batch_size = 8;
  float learning_rate = 3e-4f;
  int epochs = 20;  // default-scale held-out exact match saturates near epoch 16
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float weight_decay = 0.017f;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  AdamWConfig optimizer() const;
};

// Next-token targets for one instance: row t predicts sequence[t + 1].
// row_mask keeps exactly the rows whose target lies inside gold_cot, so the
// final row and everything predicting question tokens are dropped.
struct NextTokenTargets {
  std::vector<int> targets;          // [seq_len], last entry is a placeholder 0
  std::vector<std::uint8_t> row_mask;  // [seq_len]
  int supervised = 0;                // number of active rows
};
NextTokenTargets next_token_targets(const task::TaskInstance& instance);

// Token-mean cross-entropy over the supervised rows of the whole batch, as a
// differentiable graph node. Throws on an empty batch.
Tensor sft_loss(std::span<const task::TaskInstance> batch, const Weights& weights);

// One forward/backward pass plus one optimizer update. Returns the loss value.
float sft_step(std::span<const task::TaskInstance> batch, Weights& weights, AdamW& optimizer);

// Called after each epoch with the zero-based epoch index and its mean loss.
using EpochSink = std::function<void(int, float)>;

// Shuffled mini-batch epochs over the dataset; returns per-epoch mean losses.
std::vector<float> run_sft(const std::vector<task::TaskInstance>& dataset, Weights& weights,
                           const SftConfig& config, const EpochSink& sink = nullptr);

// Fraction of instances whose greedy completion earns the exact-match reward.
// Decoding starts from the question, stops at kEos or after max_new tokens.
// Optional adapters or cache policy route the decode through the gated or
// compressed path; passing both is an error, as is an empty dataset.
double eval_exact_match(std::span<const task::TaskInstance> instances, const Weights& weights,
                        int max_new, const GatingAdapters* adapters = nullptr,
                        const CachePolicy* policy = nullptr);

}  // namespace rlkv
