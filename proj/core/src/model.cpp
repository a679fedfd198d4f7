#include "rlkv/model.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>

#include "rlkv/kv_cache.hpp"
#include "rlkv/rng.hpp"

namespace rlkv {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_query_heads < 1 || n_kv_heads < 1) fail("head counts must be >= 1");
  if (n_query_heads % n_kv_heads != 0) fail("n_query_heads must be divisible by n_kv_heads");
  if (head_dim < 2 || head_dim % 2 != 0) fail("head_dim must be a positive even number");
  if (ff_dim < 1) fail("ff_dim must be >= 1");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (sink_train < 1 || local_train < 1) fail("sink_train and local_train must be >= 1");
  if (sink_train + local_train >= max_seq_len)
    fail("sink_train + local_train must be < max_seq_len");
}

GatingAdapters::GatingAdapters(int n_layers, int n_kv_heads, float init) {
  if (n_layers < 1 || n_kv_heads < 1)
    throw std::invalid_argument("GatingAdapters: layer and head counts must be positive");
  if (init < 0.0f || init > 1.0f)
    throw std::invalid_argument("GatingAdapters: init value must be in [0,1]");
  alpha_ = Tensor::full({n_layers, n_kv_heads}, init, /*requires_grad=*/true);
}

float GatingAdapters::value(int layer, int kv_head) const {
  if (layer < 0 || layer >= n_layers() || kv_head < 0 || kv_head >= n_kv_heads())
    throw std::out_of_range("GatingAdapters::value: index outside grid");
  return alpha_.at2(layer, kv_head);
}

float GatingAdapters::mean() const {
  double total = 0.0;
  const float* p = alpha_.data();
  for (std::int64_t i = 0; i < alpha_.numel(); ++i) total += p[i];
  return static_cast<float>(total / static_cast<double>(alpha_.numel()));
}

float GatingAdapters::sparsity_frac(float threshold) const {
  int below = 0;
  const float* p = alpha_.data();
  for (std::int64_t i = 0; i < alpha_.numel(); ++i)
    if (p[i] < threshold) ++below;
  return static_cast<float>(below) / static_cast<float>(alpha_.numel());
}

void GatingAdapters::clamp_unit_interval() {
  float* p = alpha_.data();
  for (std::int64_t i = 0; i < alpha_.numel(); ++i) {
    if (p[i] < 0.0f) p[i] = 0.0f;
    if (p[i] > 1.0f) p[i] = 1.0f;
  }
}

GatingAdapters::GatingAdapters(Tensor alpha) : alpha_(std::move(alpha)) {
  if (!alpha_.defined() || alpha_.shape().size() != 2)
    throw ShapeError("GatingAdapters: alpha must be [n_layers, n_kv_heads]");
  const float* p = alpha_.data();
  for (std::int64_t i = 0; i < alpha_.numel(); ++i)
    if (!(p[i] >= 0.0f && p[i] <= 1.0f))
      throw std::invalid_argument("GatingAdapters: entry " + std::to_string(i) + " = " +
                                  std::to_string(p[i]) + " outside [0,1]");
}

GatingAdapters GatingAdapters::copy() const {
  Tensor a = alpha_.detach();
  a.set_requires_grad(alpha_.requires_grad());
  return GatingAdapters(std::move(a));
}

namespace {

Tensor normal_init(Rng& rng, Shape shape, float stddev) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<float>(rng.next_normal()) * stddev;
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

}  // namespace

Weights::Weights(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, /*stream=*/0x77e1u));
  const int dm = config_.d_model();
  const int kv = config_.kv_dim();
  const float s = 0.02f;

  tok_embed = normal_init(rng, {config_.vocab_size, dm}, s);
  layers.resize(static_cast<std::size_t>(config_.n_layers));
  for (auto& lw : layers) {
    lw.ln1_gain = Tensor::full({dm}, 1.0f, true);
    lw.ln1_bias = Tensor::zeros({dm}, true);
    lw.wq = normal_init(rng, {dm, dm}, s);
    lw.wk = normal_init(rng, {dm, kv}, s);
    lw.wv = normal_init(rng, {dm, kv}, s);
    lw.wo = normal_init(rng, {dm, dm}, s);
    lw.ln2_gain = Tensor::full({dm}, 1.0f, true);
    lw.ln2_bias = Tensor::zeros({dm}, true);
    lw.w_ff1 = normal_init(rng, {dm, config_.ff_dim}, s);
    lw.w_ff2 = normal_init(rng, {config_.ff_dim, dm}, s);
  }
  lnf_gain = Tensor::full({dm}, 1.0f, true);
  lnf_bias = Tensor::zeros({dm}, true);
  lm_head = normal_init(rng, {dm, config_.vocab_size}, s);
  rope_table = std::make_shared<RopeTable>(config_.head_dim, config_.max_seq_len);
}

std::vector<std::pair<std::string, Tensor>> Weights::named() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embed", tok_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", layers[l].ln1_gain);
    out.emplace_back(p + "ln1_bias", layers[l].ln1_bias);
    out.emplace_back(p + "wq", layers[l].wq);
    out.emplace_back(p + "wk", layers[l].wk);
    out.emplace_back(p + "wv", layers[l].wv);
    out.emplace_back(p + "wo", layers[l].wo);
    out.emplace_back(p + "ln2_gain", layers[l].ln2_gain);
    out.emplace_back(p + "ln2_bias", layers[l].ln2_bias);
    out.emplace_back(p + "w_ff1", layers[l].w_ff1);
    out.emplace_back(p + "w_ff2", layers[l].w_ff2);
  }
  out.emplace_back("lnf_gain", lnf_gain);
  out.emplace_back("lnf_bias", lnf_bias);
  out.emplace_back("lm_head", lm_head);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Weights::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  const Weights& w = *this;
  out.emplace_back("tok_embed", &w.tok_embed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", &w.layers[l].ln1_gain);
    out.emplace_back(p + "ln1_bias", &w.layers[l].ln1_bias);
    out.emplace_back(p + "wq", &w.layers[l].wq);
    out.emplace_back(p + "wk", &w.layers[l].wk);
    out.emplace_back(p + "wv", &w.layers[l].wv);
    out.emplace_back(p + "wo", &w.layers[l].wo);
    out.emplace_back(p + "ln2_gain", &w.layers[l].ln2_gain);
    out.emplace_back(p + "ln2_bias", &w.layers[l].ln2_bias);
    out.emplace_back(p + "w_ff1", &w.layers[l].w_ff1);
    out.emplace_back(p + "w_ff2", &w.layers[l].w_ff2);
  }
  out.emplace_back("lnf_gain", &w.lnf_gain);
  out.emplace_back("lnf_bias", &w.lnf_bias);
  out.emplace_back("lm_head", &w.lm_head);
  return out;
}

void Weights::set_trainable(bool trainable) {
  for (auto& [name, t] : named()) t.set_requires_grad(trainable);
}

std::int64_t Weights::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : named()) n += t->numel();
  return n;
}

namespace {

// Masks are pure constants reused across every graph; caching keeps repeated
// forward passes from rebuilding T*T tensors each layer.
thread_local std::map<int, Tensor> g_causal_cache;
thread_local std::map<std::tuple<int, int, int>, Tensor> g_streaming_cache;

}  // namespace

Tensor causal_mask(int t) {
  if (t < 1) throw std::invalid_argument("causal_mask: t must be >= 1");
  auto it = g_causal_cache.find(t);
  if (it != g_causal_cache.end()) return it->second;
  std::vector<float> m(static_cast<std::size_t>(t) * t, 0.0f);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * t + j] = 1.0f;
  Tensor mask = Tensor::from_data({t, t}, std::move(m));
  g_causal_cache.emplace(t, mask);
  return mask;
}

Tensor streaming_mask(int t, int sink, int local) {
  if (t < 1) throw std::invalid_argument("streaming_mask: t must be >= 1");
  auto key = std::make_tuple(t, sink, local);
  auto it = g_streaming_cache.find(key);
  if (it != g_streaming_cache.end()) return it->second;
  std::vector<float> m(static_cast<std::size_t>(t) * t, 0.0f);
  for (int i = 0; i < t; ++i)
    for (int j : streaming_visible_set(i, sink, local))
      m[static_cast<std::size_t>(i) * t + j] = 1.0f;
  Tensor mask = Tensor::from_data({t, t}, std::move(m));
  g_streaming_cache.emplace(key, mask);
  return mask;
}

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  if (!q.defined() || !k.defined() || !v.defined())
    throw std::invalid_argument(std::string(op) + ": undefined operand");
  if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
    throw ShapeError(std::string(op) + ": q, k, v must be rank 2");
  if (q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0))
    throw ShapeError(std::string(op) + ": q, k, v must agree on sequence length");
  if (q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1))
    throw ShapeError(std::string(op) + ": q, k, v must agree on head_dim");
}

Tensor attention_with_mask(const Tensor& q, const Tensor& k, const Tensor& v,
                           const Tensor& mask) {
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt_d);
  Tensor probs = softmax_lastdim(mask_fill(scores, mask, -1e30f));
  return matmul(probs, v);
}

// Shared score computation so the two branches of the gate see identical
// pre-mask logits.
Tensor gated_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& alpha_entry, const Tensor& full_mask,
                       const Tensor& stream_mask) {
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt_d);
  Tensor out_full = matmul(softmax_lastdim(mask_fill(scores, full_mask, -1e30f)), v);
  Tensor out_stream = matmul(softmax_lastdim(mask_fill(scores, stream_mask, -1e30f)), v);
  return add(scale(out_full, alpha_entry), scale(out_stream, one_minus(alpha_entry)));
}

}  // namespace

Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask) {
  check_qkv(q, k, v, "attention_head");
  const int t = q.dim(0);
  if (mask.shape() != Shape{t, t})
    throw ShapeError("attention_head: mask must be [" + std::to_string(t) + ", " +
                     std::to_string(t) + "], got " + shape_str(mask.shape()));
  const float* m = mask.data();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j)
      if (m[static_cast<std::size_t>(i) * t + j] != 0.0f)
        throw std::invalid_argument("attention_head: mask lets position " + std::to_string(i) +
                                    " attend to future position " + std::to_string(j));
  return attention_with_mask(q, k, v, mask);
}

Tensor mixed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& alpha_entry, int sink, int local) {
  check_qkv(q, k, v, "mixed_attention");
  if (!alpha_entry.defined() || alpha_entry.numel() != 1)
    throw ShapeError("mixed_attention: alpha_entry must be a single value");
  const float a = alpha_entry.at(0);
  if (!(a >= 0.0f && a <= 1.0f))
    throw std::invalid_argument("mixed_attention: alpha " + std::to_string(a) +
                                " outside [0,1]");
  if (sink < 1 || local < 1)
    throw std::invalid_argument("mixed_attention: sink and local must be >= 1");
  const int t = q.dim(0);
  return gated_attention(q, k, v, alpha_entry, causal_mask(t), streaming_mask(t, sink, local));
}

Tensor forward_logits(std::span<const int> tokens, const Weights& weights,
                      const GatingAdapters* adapters, AttentionMode mode) {
  const ModelConfig& cfg = weights.config();
  const int t = static_cast<int>(tokens.size());
  if (t < 1) throw std::invalid_argument("forward_logits: empty token sequence");
  if (t > cfg.max_seq_len)
    throw std::invalid_argument("forward_logits: sequence length " + std::to_string(t) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("forward_logits: token id " + std::to_string(id) +
                                  " outside vocabulary");
  if (mode == AttentionMode::Mixed) {
    if (!adapters) throw std::invalid_argument("forward_logits: mixed mode requires adapters");
    if (adapters->n_layers() != cfg.n_layers || adapters->n_kv_heads() != cfg.n_kv_heads)
      throw ShapeError("forward_logits: adapters are " + std::to_string(adapters->n_layers()) +
                       "x" + std::to_string(adapters->n_kv_heads()) + ", model needs " +
                       std::to_string(cfg.n_layers) + "x" + std::to_string(cfg.n_kv_heads));
  }

  const int hd = cfg.head_dim;
  const int group = cfg.group_size();
  Tensor cmask = causal_mask(t);
  Tensor smask;
  if (mode == AttentionMode::Mixed) smask = streaming_mask(t, cfg.sink_train, cfg.local_train);

  Tensor x = embedding_lookup(weights.tok_embed, tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = weights.layers[static_cast<std::size_t>(l)];
    Tensor xn = layernorm(x, lw.ln1_gain, lw.ln1_bias);
    Tensor q = matmul(xn, lw.wq);
    Tensor k = matmul(xn, lw.wk);
    Tensor v = matmul(xn, lw.wv);

    std::vector<Tensor> head_outs(static_cast<std::size_t>(cfg.n_query_heads));
    for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
      Tensor k_h = rope(slice_lastdim(k, kh * hd, hd), weights.rope_table, 0);
      Tensor v_h = slice_lastdim(v, kh * hd, hd);
      Tensor alpha_entry;
      if (mode == AttentionMode::Mixed) {
        alpha_entry = take_element(adapters->alpha(), static_cast<std::int64_t>(l) *
                                                          cfg.n_kv_heads + kh);
        const float a = alpha_entry.at(0);
        if (!(a >= 0.0f && a <= 1.0f))
          throw std::invalid_argument("forward_logits: gate (" + std::to_string(l) + ", " +
                                      std::to_string(kh) + ") = " + std::to_string(a) +
                                      " outside [0,1]");
      }
      for (int g = 0; g < group; ++g) {
        const int qh = kh * group + g;
        Tensor q_h = rope(slice_lastdim(q, qh * hd, hd), weights.rope_table, 0);
        head_outs[static_cast<std::size_t>(qh)] =
            mode == AttentionMode::Full
                ? attention_with_mask(q_h, k_h, v_h, cmask)
                : gated_attention(q_h, k_h, v_h, alpha_entry, cmask, smask);
      }
    }
    x = add(x, matmul(concat_lastdim(head_outs), lw.wo));

    Tensor xn2 = layernorm(x, lw.ln2_gain, lw.ln2_bias);
    x = add(x, matmul(gelu(matmul(xn2, lw.w_ff1)), lw.w_ff2));
  }
  Tensor xf = layernorm(x, weights.lnf_gain, weights.lnf_bias);
  return matmul(xf, weights.lm_head);
}

Tensor sequence_logprobs(std::span<const int> tokens, const Weights& weights,
                         const GatingAdapters* adapters, AttentionMode mode, int start,
                         float temperature) {
  const int n = static_cast<int>(tokens.size());
  if (start < 1 || start >= n)
    throw std::invalid_argument("sequence_logprobs: start must be in [1, seq_len)");
  if (!(temperature > 0.0f))
    throw std::invalid_argument("sequence_logprobs: temperature must be > 0");

  Tensor logits = forward_logits(tokens, weights, adapters, mode);
  if (temperature != 1.0f) logits = scale(logits, 1.0f / temperature);
  Tensor logp = log_softmax_lastdim(logits);

  // Row t scores the token at position t+1; the final row has no target.
  std::vector<int> next_ids(static_cast<std::size_t>(n), 0);
  for (int i = 0; i + 1 < n; ++i) next_ids[static_cast<std::size_t>(i)] = tokens[i + 1];
  Tensor per_row = gather_per_row(logp, next_ids);
  return slice_lastdim(per_row, start - 1, n - start);
}

}  // namespace rlkv
