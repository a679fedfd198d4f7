#include "rlkv/decoder.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>

#include "rlkv/detail/kernels.hpp"
#include "rlkv/rng.hpp"

namespace rlkv {

const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::Eos: return "eos";
    case StopReason::MaxNew: return "max_new";
    case StopReason::MaxSeqLen: return "max_seq_len";
  }
  return "unknown";
}

Decoder::Decoder(const Weights& weights)
    : weights_(weights),
      mode_(Mode::Policy),
      policy_(CachePolicy::all_full(weights.config().n_layers, weights.config().n_kv_heads)) {
  heads_.resize(static_cast<std::size_t>(policy_.n_heads()));
}

Decoder::Decoder(const Weights& weights, const CachePolicy& policy)
    : weights_(weights), mode_(Mode::Policy), policy_(policy) {
  const ModelConfig& cfg = weights.config();
  if (policy_.n_layers() != cfg.n_layers || policy_.n_kv_heads() != cfg.n_kv_heads)
    throw std::invalid_argument("Decoder: policy grid " + std::to_string(policy_.n_layers()) +
                                "x" + std::to_string(policy_.n_kv_heads()) +
                                " does not match the model");
  heads_.resize(static_cast<std::size_t>(policy_.n_heads()));
}

Decoder::Decoder(const Weights& weights, const GatingAdapters& adapters)
    : weights_(weights),
      mode_(Mode::Gated),
      policy_(CachePolicy::all_full(weights.config().n_layers, weights.config().n_kv_heads)) {
  const ModelConfig& cfg = weights.config();
  if (adapters.n_layers() != cfg.n_layers || adapters.n_kv_heads() != cfg.n_kv_heads)
    throw std::invalid_argument("Decoder: adapter grid does not match the model");
  const float* a = adapters.alpha().data();
  alpha_.assign(a, a + adapters.n_entries());
  for (float v : alpha_)
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("Decoder: gate value " + std::to_string(v) + " outside [0,1]");
  heads_.resize(static_cast<std::size_t>(policy_.n_heads()));
}

Decoder::HeadStore& Decoder::head(int layer, int kv_head) {
  return heads_[static_cast<std::size_t>(layer) * weights_.config().n_kv_heads + kv_head];
}

const std::vector<int>& Decoder::kept_positions(int layer, int kv_head) const {
  const ModelConfig& cfg = weights_.config();
  if (layer < 0 || layer >= cfg.n_layers || kv_head < 0 || kv_head >= cfg.n_kv_heads)
    throw std::out_of_range("Decoder::kept_positions: head index outside grid");
  return heads_[static_cast<std::size_t>(layer) * cfg.n_kv_heads + kv_head].state.kept;
}

MemoryReport Decoder::memory_report(int bytes_per_value) const {
  const int hd = weights_.config().head_dim;
  MemoryReport report;
  report.per_head_bytes.reserve(heads_.size());
  for (const auto& hs : heads_) {
    std::int64_t rows = static_cast<std::int64_t>(hs.k_rows.size()) / hd;
    std::int64_t bytes = rows * 2 * hd * bytes_per_value;
    report.per_head_bytes.push_back(bytes);
    report.total_bytes += bytes;
  }
  return report;
}

// Softmax attention of one query over every stored row. probs (when given)
// receives the attention weights aligned with the rows.
void Decoder::attend_full(const HeadStore& hs, const float* q, float* out, float* probs) const {
  const int hd = weights_.config().head_dim;
  const int rows = static_cast<int>(hs.k_rows.size()) / hd;
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<float> scores(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    float s = static_cast<float>(detail::dot(q, hs.k_rows.data() + static_cast<std::size_t>(i) * hd, hd));
    scores[static_cast<std::size_t>(i)] = s * inv_sqrt_d;
  }
  std::vector<float> p(static_cast<std::size_t>(rows));
  detail::softmax_row(scores.data(), p.data(), rows);
  detail::matmul(p.data(), hs.v_rows.data(), out, 1, rows, hd);
  if (probs) std::memcpy(probs, p.data(), p.size() * sizeof(float));
}

// Same attention restricted to the rows at `visible` (ascending slot indices).
void Decoder::attend_subset(const HeadStore& hs, std::span<const int> visible, const float* q,
                            float* out) const {
  const int hd = weights_.config().head_dim;
  const int m = static_cast<int>(visible.size());
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<float> scores(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const float* krow = hs.k_rows.data() + static_cast<std::size_t>(visible[i]) * hd;
    scores[static_cast<std::size_t>(i)] = static_cast<float>(detail::dot(q, krow, hd)) * inv_sqrt_d;
  }
  std::vector<float> p(static_cast<std::size_t>(m));
  detail::softmax_row(scores.data(), p.data(), m);

  std::vector<double> acc(static_cast<std::size_t>(hd), 0.0);
  for (int i = 0; i < m; ++i) {
    double pv = p[static_cast<std::size_t>(i)];
    const float* vrow = hs.v_rows.data() + static_cast<std::size_t>(visible[i]) * hd;
    for (int j = 0; j < hd; ++j) acc[static_cast<std::size_t>(j)] += pv * vrow[j];
  }
  for (int j = 0; j < hd; ++j) out[j] = static_cast<float>(acc[static_cast<std::size_t>(j)]);
}

std::vector<float> Decoder::step(int token) {
  const ModelConfig& cfg = weights_.config();
  if (pos_ >= cfg.max_seq_len)
    throw std::runtime_error("Decoder::step: max_seq_len " + std::to_string(cfg.max_seq_len) +
                             " already consumed");
  if (token < 0 || token >= cfg.vocab_size)
    throw std::invalid_argument("Decoder::step: token id " + std::to_string(token) +
                                " outside vocabulary");

  const int t = pos_;
  const int dm = cfg.d_model();
  const int kv = cfg.kv_dim();
  const int hd = cfg.head_dim;
  const int group = cfg.group_size();
  const int half = hd / 2;
  const float* cos_t = weights_.rope_table->cos_tab.data() + static_cast<std::size_t>(t) * half;
  const float* sin_t = weights_.rope_table->sin_tab.data() + static_cast<std::size_t>(t) * half;

  std::vector<float> x(weights_.tok_embed.data() + static_cast<std::size_t>(token) * dm,
                       weights_.tok_embed.data() + static_cast<std::size_t>(token + 1) * dm);

  std::vector<float> xn(static_cast<std::size_t>(dm));
  std::vector<float> q_row(static_cast<std::size_t>(dm));
  std::vector<float> k_row(static_cast<std::size_t>(kv));
  std::vector<float> v_row(static_cast<std::size_t>(kv));
  std::vector<float> concat_row(static_cast<std::size_t>(dm));
  std::vector<float> attn(static_cast<std::size_t>(dm));
  std::vector<float> q_head(static_cast<std::size_t>(hd));
  std::vector<float> branch_full(static_cast<std::size_t>(hd));
  std::vector<float> branch_stream(static_cast<std::size_t>(hd));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = weights_.layers[static_cast<std::size_t>(l)];
    detail::layernorm_row(x.data(), lw.ln1_gain.data(), lw.ln1_bias.data(), xn.data(), dm, 1e-5f);
    detail::matmul(xn.data(), lw.wq.data(), q_row.data(), 1, dm, dm);
    detail::matmul(xn.data(), lw.wk.data(), k_row.data(), 1, dm, kv);
    detail::matmul(xn.data(), lw.wv.data(), v_row.data(), 1, dm, kv);

    for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
      HeadStore& hs = head(l, kh);
      const HeadPolicy& hp = policy_.at(l, kh);
      const bool score_evict_head = mode_ == Mode::Policy && hp.kind == CacheKind::ScoreEvict;
      const std::size_t old_rows = hs.state.kept.size();

      // Append this position's K (rotated in place) and V.
      hs.k_rows.insert(hs.k_rows.end(), k_row.begin() + kh * hd, k_row.begin() + (kh + 1) * hd);
      detail::rope_row(hs.k_rows.data() + old_rows * hd, cos_t, sin_t, hd, +1);
      hs.v_rows.insert(hs.v_rows.end(), v_row.begin() + kh * hd, v_row.begin() + (kh + 1) * hd);

      // ScoreEvict bookkeeping inserts t itself after seeing the attention
      // row, so only the other kinds record the position here.
      if (!score_evict_head) {
        hs.state.kept.push_back(t);
        if (mode_ == Mode::Policy && hp.kind == CacheKind::Streaming) {
          // Shrink to exactly the visible set before attending.
          std::size_t w = 0;
          for (std::size_t r = 0; r < hs.state.kept.size(); ++r) {
            int p = hs.state.kept[r];
            if (p < hp.sink || p > t - hp.local) {
              if (w != r) {
                hs.state.kept[w] = hs.state.kept[r];
                std::memcpy(hs.k_rows.data() + w * hd, hs.k_rows.data() + r * hd,
                            sizeof(float) * static_cast<std::size_t>(hd));
                std::memcpy(hs.v_rows.data() + w * hd, hs.v_rows.data() + r * hd,
                            sizeof(float) * static_cast<std::size_t>(hd));
              }
              ++w;
            }
          }
          hs.state.kept.resize(w);
          hs.k_rows.resize(w * hd);
          hs.v_rows.resize(w * hd);
        }
      }

      const std::size_t rows = hs.k_rows.size() / static_cast<std::size_t>(hd);
      std::vector<float> group_probs;
      std::vector<double> group_acc;
      if (score_evict_head) group_acc.assign(rows, 0.0);

      for (int g = 0; g < group; ++g) {
        const int qh = kh * group + g;
        std::memcpy(q_head.data(), q_row.data() + static_cast<std::size_t>(qh) * hd,
                    sizeof(float) * static_cast<std::size_t>(hd));
        detail::rope_row(q_head.data(), cos_t, sin_t, hd, +1);
        float* out = concat_row.data() + static_cast<std::size_t>(qh) * hd;

        if (mode_ == Mode::Gated) {
          const float a = alpha_[static_cast<std::size_t>(l) * cfg.n_kv_heads + kh];
          attend_full(hs, q_head.data(), branch_full.data(), nullptr);
          auto vis = streaming_visible_set(t, cfg.sink_train, cfg.local_train);
          // Full storage means slot index == position.
          attend_subset(hs, vis, q_head.data(), branch_stream.data());
          const float om = 1.0f - a;
          for (int j = 0; j < hd; ++j) out[j] = branch_full[j] * a + branch_stream[j] * om;
        } else if (score_evict_head) {
          std::vector<float> probs(rows);
          attend_full(hs, q_head.data(), out, probs.data());
          for (std::size_t r = 0; r < rows; ++r) group_acc[r] += probs[r];
        } else {
          attend_full(hs, q_head.data(), out, nullptr);
        }
      }

      if (score_evict_head) {
        // Row covers the pre-insert kept entries; the current position's own
        // column is dropped, it starts with zero accumulated mass.
        group_probs.resize(old_rows);
        for (std::size_t r = 0; r < old_rows; ++r)
          group_probs[r] = static_cast<float>(group_acc[r]);
        auto erased = score_evict_update(hs.state, group_probs, t, hp);
        for (std::size_t slot : erased) {
          hs.k_rows.erase(hs.k_rows.begin() + static_cast<std::ptrdiff_t>(slot * hd),
                          hs.k_rows.begin() + static_cast<std::ptrdiff_t>((slot + 1) * hd));
          hs.v_rows.erase(hs.v_rows.begin() + static_cast<std::ptrdiff_t>(slot * hd),
                          hs.v_rows.begin() + static_cast<std::ptrdiff_t>((slot + 1) * hd));
        }
      }
    }

    detail::matmul(concat_row.data(), lw.wo.data(), attn.data(), 1, dm, dm);
    for (int i = 0; i < dm; ++i) x[static_cast<std::size_t>(i)] += attn[static_cast<std::size_t>(i)];

    detail::layernorm_row(x.data(), lw.ln2_gain.data(), lw.ln2_bias.data(), xn.data(), dm, 1e-5f);
    std::vector<float> h1(static_cast<std::size_t>(cfg.ff_dim));
    detail::matmul(xn.data(), lw.w_ff1.data(), h1.data(), 1, dm, cfg.ff_dim);
    for (auto& v : h1) v = detail::gelu_scalar(v);
    detail::matmul(h1.data(), lw.w_ff2.data(), attn.data(), 1, cfg.ff_dim, dm);
    for (int i = 0; i < dm; ++i) x[static_cast<std::size_t>(i)] += attn[static_cast<std::size_t>(i)];
  }

  detail::layernorm_row(x.data(), weights_.lnf_gain.data(), weights_.lnf_bias.data(), xn.data(),
                        dm, 1e-5f);
  std::vector<float> logits(static_cast<std::size_t>(cfg.vocab_size));
  detail::matmul(xn.data(), weights_.lm_head.data(), logits.data(), 1, dm, cfg.vocab_size);

  ++pos_;
  return logits;
}

namespace {

// Token choice plus its log-probability under the generating distribution.
// Mirrors the graph's arithmetic: optional float scale by 1/temperature, then
// log-softmax with a double log-sum-exp.
std::pair<int, float> choose_token(const std::vector<float>& logits, float temperature,
                                   Rng& rng) {
  const int n = static_cast<int>(logits.size());
  if (temperature == 0.0f) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
    double lse = detail::logsumexp_row(logits.data(), n);
    return {best, static_cast<float>(logits[static_cast<std::size_t>(best)] - lse)};
  }

  std::vector<float> scaled;
  const float* src = logits.data();
  if (temperature != 1.0f) {
    const float c = 1.0f / temperature;
    scaled.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) scaled[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] * c;
    src = scaled.data();
  }

  std::vector<float> probs(static_cast<std::size_t>(n));
  detail::softmax_row(src, probs.data(), n);
  const double u = rng.next_double();
  double cum = 0.0;
  int pick = -1;
  for (int i = 0; i < n; ++i) {
    cum += probs[static_cast<std::size_t>(i)];
    if (u < cum) {
      pick = i;
      break;
    }
  }
  if (pick < 0) {
    for (int i = n - 1; i >= 0; --i)
      if (probs[static_cast<std::size_t>(i)] > 0.0f) {
        pick = i;
        break;
      }
  }
  double lse = detail::logsumexp_row(src, n);
  return {pick, static_cast<float>(src[static_cast<std::size_t>(pick)] - lse)};
}

}  // namespace

DecodeResult generate(Decoder& decoder, std::span<const int> prompt, const GenerateOptions& opt) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must not be empty");
  if (opt.max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
  if (opt.temperature < 0.0f)
    throw std::invalid_argument("generate: temperature must be >= 0");

  std::vector<float> logits;
  for (int tok : prompt) logits = decoder.step(tok);  // step() rejects overlong prompts

  Rng rng(opt.seed);
  DecodeResult res;
  for (int emitted = 0; emitted < opt.max_new; ++emitted) {
    auto [tok, lp] = choose_token(logits, opt.temperature, rng);
    res.tokens.push_back(tok);
    res.logprobs.push_back(lp);
    if (tok == opt.eos_id) {
      res.stop = StopReason::Eos;
      return res;
    }
    if (emitted + 1 == opt.max_new) {
      res.stop = StopReason::MaxNew;
      return res;
    }
    if (!decoder.can_step()) {
      res.stop = StopReason::MaxSeqLen;
      return res;
    }
    logits = decoder.step(tok);
  }
  res.stop = StopReason::MaxNew;
  return res;
}

DecodeResult generate(const Weights& weights, std::span<const int> prompt,
                      const GenerateOptions& opt, const GatingAdapters* adapters,
                      const CachePolicy* policy) {
  if (adapters && policy)
    throw std::invalid_argument("generate: adapters and a cache policy are mutually exclusive");
  if (adapters) {
    Decoder dec(weights, *adapters);
    return generate(dec, prompt, opt);
  }
  if (policy) {
    Decoder dec(weights, *policy);
    return generate(dec, prompt, opt);
  }
  Decoder dec(weights);
  return generate(dec, prompt, opt);
}

}  // namespace rlkv
