#include "rlkv/sft.hpp"

#include <numeric>
#include <stdexcept>

#include "rlkv/decoder.hpp"
#include "rlkv/rng.hpp"

namespace rlkv {

namespace {
constexpr std::uint32_t kSftShuffleStream = 0x5f7au;
}  // namespace

void SftConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("SftConfig: batch_size must be at least 1");
  if (!(learning_rate > 0.0f)) throw std::invalid_argument("SftConfig: learning_rate must be positive");
  if (epochs < 1) throw std::invalid_argument("SftConfig: epochs must be at least 1");
  if (!(beta1 > 0.0f && beta1 < 1.0f)) throw std::invalid_argument("SftConfig: beta1 must be in (0, 1)");
  if (!(beta2 > 0.0f && beta2 < 1.0f)) throw std::invalid_argument("SftConfig: beta2 must be in (0, 1)");
  if (weight_decay < 0.0f) throw std::invalid_argument("SftConfig: weight_decay must be non-negative");
}

AdamWConfig SftConfig::optimizer() const {
  AdamWConfig opt;
  opt.lr = learning_rate;
  opt.beta1 = beta1;
  opt.beta2 = beta2;
  opt.weight_decay = weight_decay;
  return opt;
}

NextTokenTargets next_token_targets(const task::TaskInstance& instance) {
  const std::vector<int> seq = instance.full_sequence();
  const std::size_t n = seq.size();
  const std::size_t q = instance.question.size();
  if (n < 2 || q == 0 || q >= n) {
    throw std::invalid_argument("next_token_targets: malformed instance");
  }
  NextTokenTargets out;
  out.targets.resize(n, 0);
  out.row_mask.assign(n, 0);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    out.targets[t] = seq[t + 1];
    if (t + 1 >= q) {
      out.row_mask[t] = 1;
      ++out.supervised;
    }
  }
  return out;
}

Tensor sft_loss(std::span<const task::TaskInstance> batch, const Weights& weights) {
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");
  Tensor total;
  std::int64_t total_tokens = 0;
  for (const task::TaskInstance& instance : batch) {
    const std::vector<int> seq = instance.full_sequence();
    const NextTokenTargets nt = next_token_targets(instance);
    Tensor logits = forward_logits(seq, weights, nullptr, AttentionMode::Full);
    Tensor ce = cross_entropy(logits, nt.targets, nt.row_mask, Reduction::Sum);
    total = total.defined() ? add(total, ce) : ce;
    total_tokens += nt.supervised;
  }
  return scale(total, 1.0f / static_cast<float>(total_tokens));
}

float sft_step(std::span<const task::TaskInstance> batch, Weights& weights, AdamW& optimizer) {
  Tensor loss = sft_loss(batch, weights);
  backward(loss);
  optimizer.step();
  return loss.item();
}

std::vector<float> run_sft(const std::vector<task::TaskInstance>& dataset, Weights& weights,
                           const SftConfig& config, const EpochSink& sink) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("run_sft: empty dataset");

  std::vector<Tensor> params;
  for (auto& [name, tensor] : weights.named()) params.push_back(tensor);
  AdamW optimizer(std::move(params), config.optimizer());

  Rng rng(derive_seed(config.seed, kSftShuffleStream));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<float> epoch_losses;
  epoch_losses.reserve(static_cast<std::size_t>(config.epochs));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double sum = 0.0;
    int steps = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(config.batch_size)) {
      std::vector<task::TaskInstance> batch;
      const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(config.batch_size));
      batch.reserve(end - i);
      for (std::size_t j = i; j < end; ++j) batch.push_back(dataset[order[j]]);
      sum += static_cast<double>(sft_step(batch, weights, optimizer));
      ++steps;
    }
    epoch_losses.push_back(static_cast<float>(sum / steps));
    if (sink) sink(epoch, epoch_losses.back());
  }
  return epoch_losses;
}

double eval_exact_match(std::span<const task::TaskInstance> instances, const Weights& weights,
                        int max_new, const GatingAdapters* adapters, const CachePolicy* policy) {
  if (instances.empty()) throw std::invalid_argument("eval_exact_match: empty dataset");
  if (max_new < 1) throw std::invalid_argument("eval_exact_match: max_new must be at least 1");
  if (adapters != nullptr && policy != nullptr) {
    throw std::invalid_argument("eval_exact_match: adapters and policy are mutually exclusive");
  }
  GenerateOptions opt;
  opt.max_new = max_new;
  opt.temperature = 0.0f;
  opt.eos_id = task::kEos;
  double hits = 0.0;
  for (const task::TaskInstance& instance : instances) {
    const DecodeResult result = generate(weights, instance.question, opt, adapters, policy);
    hits += static_cast<double>(task::verify_reward(result.tokens, instance));
  }
  return hits / static_cast<double>(instances.size());
}

}  // namespace rlkv
