#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rlkv/kv_cache.hpp"
#include "rlkv/model.hpp"

namespace rlkv {

enum class StopReason { Eos, MaxNew, MaxSeqLen };

const char* stop_reason_name(StopReason r);

// Incremental token-at-a-time evaluator with physically pruned per-head KV
// storage. Uses the same scalar kernels as the graph ops, so a full-cache
// decode reproduces forward_logits bitwise; compressed heads differ only by
// the entries their policy dropped.
//
// Three modes, fixed at construction:
//  - plain: full cache for every head,
//  - policy: per-(layer, kv-head) retention (eviction really frees rows),
//  - gated: full storage, each head blends its full and streaming branches
//    by its gate value (rollout-time counterpart of mixed-mode forward).
class Decoder {
 public:
  explicit Decoder(const Weights& weights);
  Decoder(const Weights& weights, const CachePolicy& policy);
  Decoder(const Weights& weights, const GatingAdapters& adapters);

  // Consumes one token, returns logits for the next position [vocab_size].
  // Throws once max_seq_len tokens have been consumed.
  std::vector<float> step(int token);

  int pos() const { return pos_; }  // tokens consumed so far
  bool can_step() const { return pos_ < weights_.config().max_seq_len; }

  // Positions head (layer, kv_head) currently retains.
  const std::vector<int>& kept_positions(int layer, int kv_head) const;

  // Bytes the per-head caches hold right now (actual rows, not bounds).
  MemoryReport memory_report(int bytes_per_value = 4) const;

 private:
  struct HeadStore {
    HeadCacheState state;
    std::vector<float> k_rows;  // state.kept.size() x head_dim, same order
    std::vector<float> v_rows;
  };

  enum class Mode { Plain, Policy, Gated };

  const Weights& weights_;
  Mode mode_;
  CachePolicy policy_;          // Policy mode
  std::vector<float> alpha_;    // Gated mode snapshot, layer-major
  int pos_ = 0;
  std::vector<HeadStore> heads_;  // layer-major

  HeadStore& head(int layer, int kv_head);
  void attend_full(const HeadStore& hs, const float* q, float* out, float* probs) const;
  void attend_subset(const HeadStore& hs, std::span<const int> visible, const float* q,
                     float* out) const;
};

struct GenerateOptions {
  int max_new = 64;
  float temperature = 1.0f;  // 0 samples greedily (ties pick the smallest id)
  std::uint64_t seed = 0;
  int eos_id = -1;  // stop after emitting this token; -1 never stops early
};

struct DecodeResult {
  std::vector<int> tokens;      // emitted tokens, prompt excluded
  std::vector<float> logprobs;  // log-probability of each emitted token as sampled
  StopReason stop = StopReason::MaxNew;
};

// Runs the prompt through the decoder, then emits until eos_id, max_new, or
// the model's max_seq_len. Recorded log-probabilities use the temperature-
// scaled distribution the tokens were drawn from.
DecodeResult generate(Decoder& decoder, std::span<const int> prompt, const GenerateOptions& opt);

// Convenience wrapper choosing the decoder mode. adapters and policy are
// mutually exclusive; neither means plain full-cache decoding.
DecodeResult generate(const Weights& weights, std::span<const int> prompt,
                      const GenerateOptions& opt, const GatingAdapters* adapters = nullptr,
                      const CachePolicy* policy = nullptr);

}  // namespace rlkv
