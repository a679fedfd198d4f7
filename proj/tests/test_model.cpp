#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "rlkv/finite_diff.hpp"
#include "rlkv/kv_cache.hpp"
#include "rlkv/model.hpp"
#include "rlkv/rng.hpp"
#include "rlkv/tensor.hpp"
#include "test_support.hpp"

using namespace rlkv;
using rlkv::testing::rand_tensor;
using rlkv::testing::rel_close;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_query_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 8;
  cfg.ff_dim = 32;
  cfg.vocab_size = 20;
  cfg.max_seq_len = 48;
  cfg.sink_train = 2;
  cfg.local_train = 3;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = rng.next_int(0, vocab - 1);
  return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  float m = 0.0f;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a.at(static_cast<int>(i)) - b.at(static_cast<int>(i))));
  return m;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg;  // defaults
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.d_model() == 128);
  CHECK(cfg.kv_dim() == 64);
  CHECK(cfg.group_size() == 2);

  ModelConfig bad = cfg;
  bad.n_query_heads = 6;  // not divisible by 4 kv heads
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.sink_train = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.sink_train = 200;
  bad.local_train = 56;  // sum reaches max_seq_len
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.head_dim = 7;  // rotary needs even pairs
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("single position attention returns the value row") {
  Rng rng(0xa11u);
  Tensor q = rand_tensor(rng, {1, 8}, 1.0f, false);
  Tensor k = rand_tensor(rng, {1, 8}, 1.0f, false);
  Tensor v = rand_tensor(rng, {1, 8}, 1.0f, false);
  Tensor out = attention_head(q, k, v, causal_mask(1));
  for (int j = 0; j < 8; ++j) CHECK(out.at(j) == doctest::Approx(v.at(j)).epsilon(1e-6));
}

TEST_CASE("uniform queries average the visible values") {
  Tensor q = Tensor::full({2, 4}, 0.3f);
  Tensor k = Tensor::full({2, 4}, 0.7f);
  Rng rng(0xbeefu);
  Tensor v = rand_tensor(rng, {2, 4}, 1.0f, false);
  Tensor out = attention_head(q, k, v, causal_mask(2));
  for (int j = 0; j < 4; ++j) {
    CHECK(out.at2(0, j) == doctest::Approx(v.at2(0, j)).epsilon(1e-6));
    CHECK(out.at2(1, j) == doctest::Approx(0.5f * (v.at2(0, j) + v.at2(1, j))).epsilon(1e-6));
  }
}

TEST_CASE("attention matches a dense reference evaluation") {
  Rng rng(0xdeadu);
  const int t = 4, d = 8;
  Tensor q = rand_tensor(rng, {t, d}, 1.0f, false);
  Tensor k = rand_tensor(rng, {t, d}, 1.0f, false);
  Tensor v = rand_tensor(rng, {t, d}, 1.0f, false);
  Tensor out = attention_head(q, k, v, causal_mask(t));

  // Straight-line reference with its own softmax.
  for (int i = 0; i < t; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(i) + 1);
    for (int j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c)
        dot += static_cast<double>(q.at2(i, c)) * static_cast<double>(k.at2(j, c));
      logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (int c = 0; c < d; ++c) {
      double ref = 0.0;
      for (int j = 0; j <= i; ++j)
        ref += logits[static_cast<std::size_t>(j)] / z * static_cast<double>(v.at2(j, c));
      CHECK(rel_close(out.at2(i, c), ref, 1e-6, 1e-6));
    }
  }
}

TEST_CASE("attention rejects masks that see the future") {
  Rng rng(0xc0deu);
  Tensor q = rand_tensor(rng, {3, 4}, 1.0f, false);
  Tensor k = rand_tensor(rng, {3, 4}, 1.0f, false);
  Tensor v = rand_tensor(rng, {3, 4}, 1.0f, false);

  std::vector<float> m(9, 0.0f);
  m[0] = m[3] = m[4] = m[6] = m[7] = m[8] = 1.0f;
  m[1] = 1.0f;  // row 0 attends to position 1
  Tensor bad = Tensor::from_data({3, 3}, std::move(m));
  CHECK_THROWS_AS(attention_head(q, k, v, bad), std::invalid_argument);

  Tensor wrong_shape = Tensor::from_data({2, 2}, {1, 0, 1, 1});
  CHECK_THROWS_AS(attention_head(q, k, v, wrong_shape), ShapeError);
}

TEST_CASE("gate endpoints reproduce the pure branches") {
  Rng rng(0x5a1ebu);
  const int t = 12, d = 8, sink = 2, local = 3;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor q = rand_tensor(rng, {t, d}, 1.0f, false);
    Tensor k = rand_tensor(rng, {t, d}, 1.0f, false);
    Tensor v = rand_tensor(rng, {t, d}, 1.0f, false);

    Tensor full = attention_head(q, k, v, causal_mask(t));
    Tensor stream = attention_head(q, k, v, streaming_mask(t, sink, local));

    Tensor at_one = mixed_attention(q, k, v, Tensor::scalar(1.0f), sink, local);
    Tensor at_zero = mixed_attention(q, k, v, Tensor::scalar(0.0f), sink, local);

    CHECK(max_abs_diff(at_one, full) <= 1e-6f);
    CHECK(max_abs_diff(at_zero, stream) <= 1e-6f);
  }
}

TEST_CASE("gate is irrelevant while the streaming window covers everything") {
  Rng rng(0x77fu);
  const int t = 5;  // <= sink + local = 2 + 3
  Tensor q = rand_tensor(rng, {t, 4}, 1.0f, false);
  Tensor k = rand_tensor(rng, {t, 4}, 1.0f, false);
  Tensor v = rand_tensor(rng, {t, 4}, 1.0f, false);

  Tensor a = mixed_attention(q, k, v, Tensor::scalar(0.0f), 2, 3);
  Tensor b = mixed_attention(q, k, v, Tensor::scalar(0.37f), 2, 3);
  Tensor c = mixed_attention(q, k, v, Tensor::scalar(1.0f), 2, 3);
  CHECK(max_abs_diff(a, b) <= 1e-6f);
  CHECK(max_abs_diff(b, c) <= 1e-6f);
}

TEST_CASE("gate value outside the unit interval is rejected") {
  Rng rng(0x9e1u);
  Tensor q = rand_tensor(rng, {4, 4}, 1.0f, false);
  Tensor k = rand_tensor(rng, {4, 4}, 1.0f, false);
  Tensor v = rand_tensor(rng, {4, 4}, 1.0f, false);
  CHECK_THROWS_AS(mixed_attention(q, k, v, Tensor::scalar(1.5f), 2, 3), std::invalid_argument);
  CHECK_THROWS_AS(mixed_attention(q, k, v, Tensor::scalar(-0.1f), 2, 3), std::invalid_argument);
}

TEST_CASE("gradient flows through the gate to the blend weight") {
  Rng rng(0x6a7e5u);
  Tensor q = rand_tensor(rng, {10, 8}, 1.0f, false);
  Tensor k = rand_tensor(rng, {10, 8}, 1.0f, false);
  Tensor v = rand_tensor(rng, {10, 8}, 1.0f, false);
  Tensor alpha = Tensor::scalar(0.6f, /*requires_grad=*/true);

  rlkv::testing::check_grads(
      "mixed_attention alpha",
      [&](const std::vector<Tensor>& in) { return mixed_attention(q, k, v, in[0], 2, 3); },
      {alpha}, 0x6a7e5u);
}

TEST_CASE("gating adapters track mean sparsity and clamping") {
  GatingAdapters a(2, 3, 1.0f);
  CHECK(a.n_entries() == 6);
  CHECK(a.mean() == doctest::Approx(1.0f));
  CHECK(a.sparsity_frac() == doctest::Approx(0.0f));
  CHECK(a.alpha().requires_grad());

  float* p = a.alpha().data();
  p[0] = -0.2f;
  p[1] = 0.01f;
  p[2] = 0.6f;
  p[3] = 1.7f;
  a.clamp_unit_interval();
  CHECK(a.value(0, 0) == 0.0f);
  CHECK(a.value(0, 1) == doctest::Approx(0.01f));
  CHECK(a.value(1, 0) == 1.0f);
  CHECK(a.sparsity_frac() == doctest::Approx(2.0f / 6.0f));

  GatingAdapters b = a.copy();
  b.alpha().data()[2] = 0.9f;
  CHECK(a.value(0, 2) == doctest::Approx(0.6f));  // deep copy

  CHECK_THROWS_AS(GatingAdapters(0, 3), std::invalid_argument);
  CHECK_THROWS_AS(GatingAdapters(2, 3, 1.5f), std::invalid_argument);
}

TEST_CASE("weights enumerate a stable parameter catalog") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 42);
  auto names = w.named();
  // embedding + 2 layers x 10 tensors + final norm pair + head
  CHECK(names.size() == 1 + 2 * 10 + 3);
  CHECK(names.front().first == "tok_embed");
  CHECK(names[1].first == "layers.0.ln1_gain");
  CHECK(names.back().first == "lm_head");

  std::int64_t expected = 0;
  for (auto& [n, t] : names) expected += t.numel();
  CHECK(w.param_count() == expected);

  // Same seed, same draw; different seed, different draw.
  Weights w2(cfg, 42);
  CHECK(max_abs_diff(w.tok_embed, w2.tok_embed) == 0.0f);
  Weights w3(cfg, 43);
  CHECK(max_abs_diff(w.tok_embed, w3.tok_embed) > 0.0f);

  w.set_trainable(false);
  CHECK(!w.lm_head.requires_grad());
  w.set_trainable(true);
  CHECK(w.lm_head.requires_grad());
}

TEST_CASE("mixed mode with all-ones gates equals full mode") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 7);
  GatingAdapters ones(cfg.n_layers, cfg.n_kv_heads, 1.0f);

  Rng rng(0x70c3u);
  for (int trial = 0; trial < 3; ++trial) {
    auto tokens = random_tokens(rng, 20, cfg.vocab_size);
    NoGradGuard ng;
    Tensor full = forward_logits(tokens, w, nullptr, AttentionMode::Full);
    Tensor mixed = forward_logits(tokens, w, &ones, AttentionMode::Mixed);
    CHECK(max_abs_diff(full, mixed) <= 1e-5f);
  }
}

TEST_CASE("forward validates inputs") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 7);
  std::vector<int> tokens = {1, 2, 3};

  CHECK_THROWS_AS(forward_logits(tokens, w, nullptr, AttentionMode::Mixed),
                  std::invalid_argument);

  std::vector<int> oor = {1, 2, cfg.vocab_size};
  CHECK_THROWS_AS(forward_logits(oor, w, nullptr, AttentionMode::Full), std::invalid_argument);

  std::vector<int> long_seq(static_cast<std::size_t>(cfg.max_seq_len) + 1, 1);
  CHECK_THROWS_AS(forward_logits(long_seq, w, nullptr, AttentionMode::Full),
                  std::invalid_argument);

  GatingAdapters wrong(cfg.n_layers + 1, cfg.n_kv_heads, 1.0f);
  CHECK_THROWS_AS(forward_logits(tokens, w, &wrong, AttentionMode::Mixed), ShapeError);
}

TEST_CASE("query heads in one group share their gate, others get none") {
  // One layer, 4 query heads over 2 kv heads. Zeroing every output-projection
  // row except one query head's slice leaves that head as the only gradient
  // path, so exactly its group's gate entry must receive gradient.
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_query_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 4;
  cfg.ff_dim = 8;
  cfg.vocab_size = 10;
  cfg.max_seq_len = 32;
  cfg.sink_train = 2;
  cfg.local_train = 3;

  Rng rng(0x6a77u);
  auto tokens = random_tokens(rng, 12, cfg.vocab_size);

  for (int qh = 0; qh < 4; ++qh) {
    Weights w(cfg, 11);
    w.set_trainable(false);
    float* wo = w.layers[0].wo.data();
    const int dm = cfg.d_model();
    for (int r = 0; r < dm; ++r) {
      bool in_slice = r >= qh * cfg.head_dim && r < (qh + 1) * cfg.head_dim;
      if (!in_slice)
        for (int c = 0; c < dm; ++c) wo[r * dm + c] = 0.0f;
    }

    GatingAdapters gates(cfg.n_layers, cfg.n_kv_heads, 0.5f);
    Tensor logits = forward_logits(tokens, w, &gates, AttentionMode::Mixed);
    backward(sum_all(logits));

    REQUIRE(gates.alpha().grad_allocated());
    const float* g = gates.alpha().grad_data();
    const int expected_group = qh / cfg.group_size();
    for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
      INFO("query head ", qh, " kv head ", kh);
      if (kh == expected_group)
        CHECK(g[kh] != 0.0f);
      else
        CHECK(g[kh] == 0.0f);
    }
  }
}

TEST_CASE("no gate entry is dead wiring") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 3);
  w.set_trainable(false);
  GatingAdapters gates(cfg.n_layers, cfg.n_kv_heads, 0.5f);

  Rng rng(0xd3adu);
  auto tokens = random_tokens(rng, 24, cfg.vocab_size);
  Tensor logits = forward_logits(tokens, w, &gates, AttentionMode::Mixed);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(0);  // final row carries no target
  std::vector<std::uint8_t> row_mask(tokens.size(), 1);
  row_mask.back() = 0;
  Tensor loss = cross_entropy(logits, targets, row_mask);
  backward(loss);

  REQUIRE(gates.alpha().grad_allocated());
  const float* g = gates.alpha().grad_data();
  for (int i = 0; i < gates.n_entries(); ++i) {
    INFO("gate entry ", i);
    CHECK(g[i] != 0.0f);
  }
}

TEST_CASE("fresh model scores near uniform cross entropy") {
  ModelConfig cfg;  // full defaults, vocab 64
  Weights w(cfg, 2024);
  Rng rng(0xf00du);
  auto tokens = random_tokens(rng, 48, cfg.vocab_size);

  NoGradGuard ng;
  Tensor logits = forward_logits(tokens, w, nullptr, AttentionMode::Full);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  std::vector<int> ids(targets.begin(), targets.end());
  ids.push_back(0);  // unused final row target
  Tensor logp = log_softmax_lastdim(logits);
  Tensor rows = gather_per_row(logp, ids);
  double total = 0.0;
  for (int i = 0; i + 1 < 48; ++i) total -= rows.at(i);
  double ce = total / 47.0;

  const double uniform = std::log(64.0);
  CHECK(ce > uniform * 0.9);
  CHECK(ce < uniform * 1.1);
}

TEST_CASE("logits move smoothly with a gate entry") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 5);
  Rng rng(0x51u);
  auto tokens = random_tokens(rng, 20, cfg.vocab_size);

  GatingAdapters base(cfg.n_layers, cfg.n_kv_heads, 0.5f);
  GatingAdapters bumped = base.copy();
  bumped.alpha().data()[1] += 1e-4f;

  NoGradGuard ng;
  Tensor a = forward_logits(tokens, w, &base, AttentionMode::Mixed);
  Tensor b = forward_logits(tokens, w, &bumped, AttentionMode::Mixed);
  float diff = max_abs_diff(a, b);
  CHECK(diff > 0.0f);
  CHECK(diff < 5e-2f);
}

TEST_CASE("forward passes are deterministic") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 9);
  GatingAdapters gates(cfg.n_layers, cfg.n_kv_heads, 0.75f);
  Rng rng(0xabcu);
  auto tokens = random_tokens(rng, 16, cfg.vocab_size);

  NoGradGuard ng;
  Tensor a = forward_logits(tokens, w, &gates, AttentionMode::Mixed);
  Tensor b = forward_logits(tokens, w, &gates, AttentionMode::Mixed);
  CHECK(max_abs_diff(a, b) == 0.0f);
}

TEST_CASE("gate gradients through the whole network match finite differences") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 17);
  w.set_trainable(false);
  Rng rng(0x917u);
  auto tokens = random_tokens(rng, 16, cfg.vocab_size);

  Tensor alpha = Tensor::from_data({cfg.n_layers, cfg.n_kv_heads}, {0.3f, 0.7f, 0.5f, 0.9f},
                                   /*requires_grad=*/true);
  rlkv::testing::check_grads(
      "forward_logits alpha",
      [&](const std::vector<Tensor>& in) {
        GatingAdapters gates(in[0]);
        return forward_logits(tokens, w, &gates, AttentionMode::Mixed);
      },
      {alpha}, 0x917u, 1e-3, 1e-4);
}

TEST_CASE("sequence logprobs line up with teacher forcing by hand") {
  ModelConfig cfg = tiny_config();
  Weights w(cfg, 23);
  Rng rng(0x40fu);
  auto tokens = random_tokens(rng, 14, cfg.vocab_size);
  const int start = 6;

  NoGradGuard ng;
  Tensor lp = sequence_logprobs(tokens, w, nullptr, AttentionMode::Full, start);
  REQUIRE(lp.shape() == Shape{14 - start});

  Tensor logits = forward_logits(tokens, w, nullptr, AttentionMode::Full);
  Tensor logp = log_softmax_lastdim(logits);
  for (int pos = start; pos < 14; ++pos) {
    float expected = logp.at2(pos - 1, tokens[static_cast<std::size_t>(pos)]);
    CHECK(lp.at(pos - start) == doctest::Approx(expected).epsilon(1e-6));
  }

  CHECK_THROWS_AS(sequence_logprobs(tokens, w, nullptr, AttentionMode::Full, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(sequence_logprobs(tokens, w, nullptr, AttentionMode::Full, 14),
                  std::invalid_argument);
  CHECK_THROWS_AS(sequence_logprobs(tokens, w, nullptr, AttentionMode::Full, 5, 0.0f),
                  std::invalid_argument);

  // Temperature flattens the distribution, so a sub-uniform token gains mass.
  Tensor hot = sequence_logprobs(tokens, w, nullptr, AttentionMode::Full, start, 2.0f);
  bool any_diff = false;
  for (int i = 0; i < 14 - start; ++i)
    if (hot.at(i) != lp.at(i)) any_diff = true;
  CHECK(any_diff);
}

