#include "rlkv/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rlkv/decoder.hpp"
#include "rlkv/rng.hpp"

namespace rlkv {

namespace {
constexpr std::uint32_t kRolloutStream = 0x6e01u;
constexpr std::uint32_t kQueryStream = 0x6e02u;
constexpr std::uint32_t kDistillStream = 0x6e03u;

// floor quotas plus one for the largest fractional remainders (ties toward
// the lower index, so the split is reproducible)
std::vector<long long> largest_remainder(long long total, std::span<const double> weights) {
  const std::size_t n = weights.size();
  std::vector<long long> quota(n, 0);
  std::vector<double> frac(n, 0.0);
  long long assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = static_cast<double>(total) * weights[i];
    quota[i] = static_cast<long long>(std::floor(share));
    frac[i] = share - static_cast<double>(quota[i]);
    assigned += quota[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (long long r = total - assigned; r > 0; --r) {
    quota[order[static_cast<std::size_t>(total - assigned - r)]] += 1;
  }
  return quota;
}
}  // namespace

void GrpoConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be at least 2");
  if (groups_per_step < 1) throw std::invalid_argument("GrpoConfig: groups_per_step must be at least 1");
  if (steps < 1) throw std::invalid_argument("GrpoConfig: steps must be at least 1");
  if (!(clip_epsilon > 0.0f && clip_epsilon < 1.0f)) {
    throw std::invalid_argument("GrpoConfig: clip_epsilon must be in (0, 1)");
  }
  if (base_penalty < 0.0f) throw std::invalid_argument("GrpoConfig: base_penalty must be non-negative");
  if (!(reward_cutoff >= 0.0f && reward_cutoff < 1.0f)) {
    throw std::invalid_argument("GrpoConfig: reward_cutoff must be in [0, 1)");
  }
  if (!(adapter_lr > 0.0f)) throw std::invalid_argument("GrpoConfig: adapter_lr must be positive");
  if (!(temperature > 0.0f)) throw std::invalid_argument("GrpoConfig: temperature must be positive");
  if (max_new < 1) throw std::invalid_argument("GrpoConfig: max_new must be at least 1");
}

std::vector<double> compute_advantages(std::span<const float> rewards) {
  if (rewards.size() < 2) {
    throw std::invalid_argument("compute_advantages: need at least two rewards");
  }
  const std::size_t n = rewards.size();
  double mean = 0.0;
  for (float r : rewards) mean += static_cast<double>(r);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float r : rewards) {
    const double d = static_cast<double>(r) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  std::vector<double> adv(n, 0.0);
  if (sd < 1e-6) return adv;
  for (std::size_t i = 0; i < n; ++i) {
    adv[i] = (static_cast<double>(rewards[i]) - mean) / sd;
  }
  return adv;
}

double adaptive_beta(double mean_reward, double cutoff, double base_penalty) {
  if (mean_reward <= cutoff) return 0.0;
  return base_penalty * std::expm1(mean_reward);
}

RolloutGroup rollout_group(const task::TaskInstance& instance, const Weights& weights,
                           const GatingAdapters& adapters, const GrpoConfig& config,
                           std::uint64_t base_seed) {
  config.validate();
  RolloutGroup group;
  group.query = instance.question;
  group.outputs.reserve(static_cast<std::size_t>(config.group_size));
  group.old_logprobs.reserve(static_cast<std::size_t>(config.group_size));
  group.rewards.reserve(static_cast<std::size_t>(config.group_size));
  for (int i = 0; i < config.group_size; ++i) {
    GenerateOptions opt;
    opt.max_new = config.max_new;
    opt.temperature = config.temperature;
    opt.seed = derive_seed(base_seed, kRolloutStream, static_cast<std::uint64_t>(i));
    opt.eos_id = task::kEos;
    DecodeResult result = generate(weights, instance.question, opt, &adapters, nullptr);
    group.rewards.push_back(task::verify_reward(result.tokens, instance));
    group.outputs.push_back(std::move(result.tokens));
    group.old_logprobs.push_back(std::move(result.logprobs));
  }
  group.advantages = compute_advantages(group.rewards);
  double sum = 0.0;
  for (float r : group.rewards) sum += static_cast<double>(r);
  group.mean_reward = sum / static_cast<double>(config.group_size);
  return group;
}

Tensor grpo_objective(const RolloutGroup& group, const GatingAdapters& adapters,
                      const Weights& weights, const GrpoConfig& config) {
  if (group.outputs.empty() || group.outputs.size() != group.advantages.size()) {
    throw std::invalid_argument("grpo_objective: malformed group");
  }
  const float lo = 1.0f - config.clip_epsilon;
  const float hi = 1.0f + config.clip_epsilon;
  Tensor total;
  for (std::size_t i = 0; i < group.outputs.size(); ++i) {
    const float a = static_cast<float>(group.advantages[i]);
    if (a == 0.0f) continue;  // exact zero term and zero gradient either way
    std::vector<int> seq = group.query;
    seq.insert(seq.end(), group.outputs[i].begin(), group.outputs[i].end());
    const int start = static_cast<int>(group.query.size());
    Tensor lp_new = sequence_logprobs(seq, weights, &adapters, AttentionMode::Mixed, start,
                                      config.temperature);
    Tensor term;
    if (config.ratio_mode == RatioMode::PerToken) {
      Tensor lp_old = Tensor::from_data({static_cast<int>(group.old_logprobs[i].size())},
                                        group.old_logprobs[i]);
      Tensor ratio = exp(sub(lp_new, lp_old));
      term = mean_all(minimum(scale(ratio, a), scale(clamp(ratio, lo, hi), a)));
    } else {
      double old_sum = 0.0;
      for (float lp : group.old_logprobs[i]) old_sum += static_cast<double>(lp);
      Tensor ratio = exp(sub(sum_all(lp_new), Tensor::scalar(static_cast<float>(old_sum))));
      term = minimum(scale(ratio, a), scale(clamp(ratio, lo, hi), a));
    }
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) {
    // zero-variance group: constant zero, with no path to the adapters
    return Tensor::scalar(0.0f);
  }
  return scale(total, 1.0f / static_cast<float>(group.outputs.size()));
}

Tensor l1_term(const GatingAdapters& adapters, float beta_eff) {
  if (beta_eff < 0.0f) throw std::invalid_argument("l1_term: beta_eff must be non-negative");
  const float norm = beta_eff / static_cast<float>(adapters.n_entries());
  return scale(sum_all(abs(adapters.alpha())), norm);
}

Tensor rl_total_objective(std::span<const RolloutGroup> groups, const GatingAdapters& adapters,
                          const Weights& weights, const GrpoConfig& config,
                          double* beta_eff_out) {
  if (groups.empty()) throw std::invalid_argument("rl_total_objective: no groups");
  config.validate();
  Tensor obj_sum;
  double beta_sum = 0.0;
  for (const RolloutGroup& group : groups) {
    Tensor obj = grpo_objective(group, adapters, weights, config);
    obj_sum = obj_sum.defined() ? add(obj_sum, obj) : obj;
    beta_sum += config.adaptive_penalty
                    ? adaptive_beta(group.mean_reward, config.reward_cutoff, config.base_penalty)
                    : static_cast<double>(config.base_penalty);
  }
  const double beta_eff = beta_sum / static_cast<double>(groups.size());
  if (beta_eff_out != nullptr) *beta_eff_out = beta_eff;
  Tensor obj_mean = scale(obj_sum, 1.0f / static_cast<float>(groups.size()));
  // the penalty term stays in the graph even at weight zero, so the adapters
  // always receive a gradient buffer and the optimizer can run
  return sub(obj_mean, l1_term(adapters, static_cast<float>(beta_eff)));
}

RlStepMetrics rl_step(std::span<const RolloutGroup> groups, GatingAdapters& adapters,
                      const Weights& weights, const GrpoConfig& config) {
  RlStepMetrics metrics;
  double reward_sum = 0.0;
  for (const RolloutGroup& group : groups) reward_sum += group.mean_reward;
  metrics.mean_reward = groups.empty() ? 0.0 : reward_sum / static_cast<double>(groups.size());
  metrics.alpha_mean = adapters.mean();
  metrics.alpha_sparsity = adapters.sparsity_frac();

  Tensor total = rl_total_objective(groups, adapters, weights, config, &metrics.beta_eff);
  metrics.objective = static_cast<double>(total.item());
  backward(scale(total, -1.0f));
  Tensor alpha = adapters.alpha();
  if (!alpha.grad_allocated()) {
    throw std::runtime_error("rl_step: adapters received no gradient");
  }
  float* a = alpha.data();
  const float* g = alpha.grad_data();
  for (std::int64_t i = 0; i < alpha.numel(); ++i) {
    a[i] -= config.adapter_lr * g[i];
  }
  alpha.zero_grad();
  adapters.clamp_unit_interval();
  return metrics;
}

std::vector<RlStepMetrics> run_rl(const std::vector<task::TaskInstance>& dataset,
                                  const Weights& weights, GatingAdapters& adapters,
                                  const GrpoConfig& config, const MetricsSink& sink) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("run_rl: empty dataset");
  for (const auto& [name, tensor] : weights.named()) {
    if (tensor->requires_grad()) {
      throw std::invalid_argument("run_rl: model weights must be frozen (set_trainable(false))");
    }
  }
  if (!adapters.alpha().requires_grad()) {
    throw std::invalid_argument("run_rl: adapters must track gradients");
  }

  Rng query_rng(derive_seed(config.seed, kQueryStream));
  std::vector<RlStepMetrics> history;
  history.reserve(static_cast<std::size_t>(config.steps));

  for (int step = 0; step < config.steps; ++step) {
    std::vector<RolloutGroup> groups;
    groups.reserve(static_cast<std::size_t>(config.groups_per_step));
    for (int g = 0; g < config.groups_per_step; ++g) {
      const std::size_t pick = static_cast<std::size_t>(
          query_rng.next_below(static_cast<std::uint64_t>(dataset.size())));
      const std::uint64_t base_seed = derive_seed(
          config.seed, kRolloutStream,
          static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(config.groups_per_step) +
              static_cast<std::uint64_t>(g));
      groups.push_back(rollout_group(dataset[pick], weights, adapters, config, base_seed));
    }
    RlStepMetrics metrics = rl_step(groups, adapters, weights, config);
    metrics.step = step;
    if (sink) sink(metrics);
    history.push_back(metrics);
  }
  return history;
}

std::vector<double> default_bucket_weights() {
  return {0.2, 0.2, 1.0 / 3.0, 0.8 / 3.0};
}

std::vector<long long> bucket_quotas(long long target, std::span<const double> weights,
                                     std::span<const long long> available) {
  if (weights.size() != available.size()) {
    throw std::invalid_argument("bucket_quotas: weights and availability disagree on bucket count");
  }
  long long total_avail = 0;
  for (long long a : available) {
    if (a < 0) throw std::invalid_argument("bucket_quotas: negative availability");
    total_avail += a;
  }
  if (total_avail < target) throw std::invalid_argument("bucket_quotas: not enough availability");

  std::vector<long long> quota = largest_remainder(target, weights);
  // clip over-full buckets and push their shortfall into buckets with spare
  // capacity, proportionally to the weights; each pass saturates a bucket or
  // clears the deficit, so this terminates
  while (true) {
    long long deficit = 0;
    for (std::size_t b = 0; b < weights.size(); ++b) {
      if (quota[b] > available[b]) {
        deficit += quota[b] - available[b];
        quota[b] = available[b];
      }
    }
    if (deficit == 0) break;
    std::vector<std::size_t> spare;
    double spare_weight = 0.0;
    for (std::size_t b = 0; b < weights.size(); ++b) {
      if (quota[b] < available[b]) {
        spare.push_back(b);
        spare_weight += weights[b];
      }
    }
    if (spare.empty()) break;  // unreachable: total availability covers the target
    std::vector<double> norm;
    norm.reserve(spare.size());
    if (spare_weight <= 0.0) {
      norm.assign(spare.size(), 1.0 / static_cast<double>(spare.size()));
    } else {
      for (std::size_t b : spare) norm.push_back(weights[b] / spare_weight);
    }
    const std::vector<long long> extra = largest_remainder(deficit, norm);
    for (std::size_t j = 0; j < spare.size(); ++j) quota[spare[j]] += extra[j];
  }
  return quota;
}

DistillResult self_distill_filter(const std::vector<task::TaskInstance>& pool,
                                  const Weights& weights, std::span<const double> bucket_weights,
                                  int target_count, std::uint64_t seed, int max_new) {
  if (pool.empty()) throw std::invalid_argument("self_distill_filter: empty pool");
  if (bucket_weights.empty()) throw std::invalid_argument("self_distill_filter: no bucket weights");
  if (target_count < 1) throw std::invalid_argument("self_distill_filter: target_count must be at least 1");
  if (max_new < 1) throw std::invalid_argument("self_distill_filter: max_new must be at least 1");
  double weight_sum = 0.0;
  for (double w : bucket_weights) {
    if (w < 0.0) throw std::invalid_argument("self_distill_filter: negative bucket weight");
    weight_sum += w;
  }
  if (std::fabs(weight_sum - 1.0) > 1e-6) {
    throw std::invalid_argument("self_distill_filter: bucket weights must sum to 1");
  }

  const std::size_t n_buckets = bucket_weights.size();
  const std::vector<int> edges = task::default_bucket_edges();
  std::vector<std::vector<std::size_t>> by_bucket(n_buckets);

  GenerateOptions opt;
  opt.max_new = max_new;
  opt.temperature = 0.0f;
  opt.eos_id = task::kEos;
  int solvable = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const DecodeResult result = generate(weights, pool[i].question, opt);
    if (task::verify_reward(result.tokens, pool[i]) != 1.0f) continue;
    const int bucket = task::difficulty_bucket(static_cast<int>(pool[i].gold_cot.size()), edges);
    if (static_cast<std::size_t>(bucket) >= n_buckets) continue;  // no weight assigned
    by_bucket[static_cast<std::size_t>(bucket)].push_back(i);
    ++solvable;
  }

  DistillResult out;
  out.solvable_count = solvable;
  out.bucket_counts.assign(n_buckets, 0);

  if (solvable <= target_count) {
    out.underfilled = solvable < target_count;
    for (std::size_t b = 0; b < n_buckets; ++b) {
      for (std::size_t idx : by_bucket[b]) out.instances.push_back(pool[idx]);
      out.bucket_counts[b] = static_cast<int>(by_bucket[b].size());
    }
    return out;
  }

  std::vector<long long> avail(n_buckets, 0);
  for (std::size_t b = 0; b < n_buckets; ++b) avail[b] = static_cast<long long>(by_bucket[b].size());
  const std::vector<long long> quota = bucket_quotas(target_count, bucket_weights, avail);

  Rng rng(derive_seed(seed, kDistillStream));
  for (std::size_t b = 0; b < n_buckets; ++b) {
    std::vector<int> picks = rng.sample_without_replacement(
        static_cast<int>(avail[b]), static_cast<int>(quota[b]));
    std::sort(picks.begin(), picks.end());
    for (int p : picks) out.instances.push_back(pool[by_bucket[b][static_cast<std::size_t>(p)]]);
    out.bucket_counts[b] = static_cast<int>(quota[b]);
  }
  return out;
}

}  // namespace rlkv
