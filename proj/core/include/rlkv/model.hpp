#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rlkv/tensor.hpp"

namespace rlkv {

// Decoder-only transformer: pre-LN blocks, rotary positions, GELU feed-forward,
// no biases outside layernorm. Query heads are grouped onto shared KV heads.
struct ModelConfig {
  int n_layers = 4;
  int n_query_heads = 8;
  int n_kv_heads = 4;
  int head_dim = 16;
  int ff_dim = 256;
  int vocab_size = 64;
  int max_seq_len = 256;
  int sink_train = 8;   // streaming branch geometry during gate training
  int local_train = 16;

  int d_model() const { return n_query_heads * head_dim; }
  int kv_dim() const { return n_kv_heads * head_dim; }
  int group_size() const { return n_query_heads / n_kv_heads; }

  void validate() const;  // throws std::invalid_argument

  bool operator==(const ModelConfig&) const = default;
};

// Per-(layer, kv-head) gate between the full and streaming attention branches.
// These are the only trainable values while gates are being learned.
class GatingAdapters {
 public:
  GatingAdapters(int n_layers, int n_kv_heads, float init = 1.0f);
  // Wraps an existing [n_layers, n_kv_heads] tensor with entries in [0,1];
  // gradient tracking carries over from the tensor.
  explicit GatingAdapters(Tensor alpha);

  Tensor& alpha() { return alpha_; }
  const Tensor& alpha() const { return alpha_; }
  int n_layers() const { return alpha_.dim(0); }
  int n_kv_heads() const { return alpha_.dim(1); }
  int n_entries() const { return n_layers() * n_kv_heads(); }

  float value(int layer, int kv_head) const;
  float mean() const;
  // Share of entries below `threshold`, i.e. gates that have effectively
  // switched their head to the streaming branch.
  float sparsity_frac(float threshold = 0.05f) const;
  void clamp_unit_interval();  // in-place projection, keeps the same tensor
  GatingAdapters copy() const;

 private:
  Tensor alpha_;  // [n_layers, n_kv_heads], grad-tracked
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, w_ff2;
};

// Owns every parameter tensor plus the rotary tables. Construction draws
// matrix entries from normal(0, 0.02) under the given seed; layernorm starts
// at identity.
class Weights {
 public:
  Weights(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  Tensor tok_embed;  // [vocab_size, d_model]
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor lm_head;  // [d_model, vocab_size]
  std::shared_ptr<const RopeTable> rope_table;

  // Stable name -> tensor listing; the order defines checkpoint layout.
  std::vector<std::pair<std::string, Tensor>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;

  void set_trainable(bool trainable);
  std::int64_t param_count() const;

 private:
  ModelConfig config_;
};

enum class AttentionMode { Full, Mixed };

// Cached constant [t, t] 0/1 masks (no grad tracking). causal_mask is lower
// triangular; streaming_mask keeps sinks plus the recent window per row.
Tensor causal_mask(int t);
Tensor streaming_mask(int t, int sink, int local);

// Scaled dot-product attention over one head. mask[i][j] == 1 lets position i
// attend to j and must respect causality (j <= i).
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask);

// Gated blend of the full-causal and streaming branches. Scores are computed
// once and masked twice, so the branches differ only in visibility. Gradient
// flows into alpha_entry (shape {1}, value in [0,1]).
Tensor mixed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& alpha_entry, int sink, int local);

// Full-sequence forward pass to [T, vocab_size] logits. Mixed mode requires
// adapters and gives every query head its KV group's gate; Full mode ignores
// adapters entirely.
Tensor forward_logits(std::span<const int> tokens, const Weights& weights,
                      const GatingAdapters* adapters, AttentionMode mode);

// Log-probabilities of tokens[start..n) given their prefixes, shape {n-start}.
// Logits are divided by temperature before the softmax (temperature > 0;
// exactly 1 leaves the graph untouched).
Tensor sequence_logprobs(std::span<const int> tokens, const Weights& weights,
                         const GatingAdapters* adapters, AttentionMode mode, int start,
                         float temperature = 1.0f);

}  // namespace rlkv
