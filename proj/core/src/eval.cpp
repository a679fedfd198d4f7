#include "rlkv/eval.hpp"

#include <stdexcept>

#include "rlkv/decoder.hpp"

namespace rlkv {

EvalResult evaluate_policy(std::span<const task::TaskInstance> instances, const Weights& weights,
                           const CachePolicy& policy, int max_new) {
  if (instances.empty()) throw std::invalid_argument("evaluate_policy: empty instance set");
  if (max_new < 1) throw std::invalid_argument("evaluate_policy: max_new must be positive");

  const ModelConfig& cfg = weights.config();
  const int n_heads = cfg.n_layers * cfg.n_kv_heads;

  EvalResult out;
  out.count = static_cast<int>(instances.size());
  out.mean_per_head_bytes.assign(static_cast<size_t>(n_heads), 0.0);

  GenerateOptions opt;
  opt.max_new = max_new;
  opt.temperature = 0.0f;  // greedy
  opt.eos_id = task::kEos;

  double reward_sum = 0.0;
  double length_sum = 0.0;
  double bytes_sum = 0.0;
  for (const task::TaskInstance& inst : instances) {
    DecodeResult res = generate(weights, inst.question, opt, nullptr, &policy);
    reward_sum += task::verify_reward(res.tokens, inst);
    length_sum += static_cast<double>(res.tokens.size());

    const int realized = static_cast<int>(inst.question.size() + res.tokens.size());
    MemoryReport mem = kv_memory_bytes(policy, realized, cfg.head_dim, 4);
    bytes_sum += static_cast<double>(mem.total_bytes);
    for (int h = 0; h < n_heads; ++h) {
      out.mean_per_head_bytes[static_cast<size_t>(h)] +=
          static_cast<double>(mem.per_head_bytes[static_cast<size_t>(h)]);
    }

    switch (task::classify_error(res.tokens, inst, max_new)) {
      case task::ErrorMode::None: out.errors.none++; break;
      case task::ErrorMode::Repetitive: out.errors.repetitive++; break;
      case task::ErrorMode::Incorrect: out.errors.incorrect++; break;
      case task::ErrorMode::Overlength: out.errors.overlength++; break;
    }
  }

  const double n = static_cast<double>(out.count);
  out.accuracy = reward_sum / n;
  out.mean_generated = length_sum / n;
  out.mean_kv_bytes = bytes_sum / n;
  for (double& b : out.mean_per_head_bytes) b /= n;
  return out;
}

}  // namespace rlkv
