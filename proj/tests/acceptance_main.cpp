// End-to-end acceptance gate. Runs eleven checks over the full system, from
// gradient correctness up to two-run pipeline determinism, and prints exactly
// one [PASS]/[FAIL] line per check. Exit code 0 only when every executed
// check passes.
//
// Flags:
//   --only 1,5,6    run a subset (the rest print [SKIP])
//   --work-dir DIR  artifact directory (default: <tmp>/rlkv-acceptance)
//   --resume        reuse checkpoints already in the work dir; without it the
//                   work dir is wiped so every run trains from scratch

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rlkv/checkpoint.hpp"
#include "rlkv/config.hpp"
#include "rlkv/decoder.hpp"
#include "rlkv/eval.hpp"
#include "rlkv/finite_diff.hpp"
#include "rlkv/grpo.hpp"
#include "rlkv/head_selection.hpp"
#include "rlkv/kv_cache.hpp"
#include "rlkv/metrics.hpp"
#include "rlkv/model.hpp"
#include "rlkv/pipeline.hpp"
#include "rlkv/rng.hpp"
#include "rlkv/sft.hpp"
#include "rlkv/tasks.hpp"
#include "rlkv/tensor.hpp"

namespace fs = std::filesystem;
using namespace rlkv;

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared fixture. Expensive artifacts (the supervised model, the two RL runs,
// the curated set) are built once on first use and shared by later checks.
// With --resume they are reloaded from the work dir when the model config
// still matches.

class Fixture {
 public:
  Fixture(fs::path dir, bool resume) : dir_(std::move(dir)), resume_(resume) {
    if (!resume_) fs::remove_all(dir_);
    fs::create_directories(dir_);
    sft_cfg_.seed = derive_seed(kMaster, 0xA201);
    rl_cfg_.seed = derive_seed(kMaster, 0xA202);
  }

  const ModelConfig& model() const { return model_; }
  const GrpoConfig& rl_cfg() const { return rl_cfg_; }

  const std::vector<task::TaskInstance>& sft_train() {
    if (sft_train_.empty()) sft_train_ = gen_set(0xA110, 2048, 1, 3);
    return sft_train_;
  }
  const std::vector<task::TaskInstance>& sft_heldout() {
    if (sft_heldout_.empty()) sft_heldout_ = gen_set(0xA112, 256, 1, 3);
    return sft_heldout_;
  }
  const std::vector<task::TaskInstance>& pool() {
    if (pool_.empty()) pool_ = gen_set(0xA114, 512, 1, 4);
    return pool_;
  }
  const std::vector<task::TaskInstance>& eval_multi() {
    // 2-3 steps: multi-step but inside the model's length generalization
    // (full-cache accuracy on 4-step chains is near chance, measured)
    if (eval_multi_.empty()) eval_multi_ = gen_set(0xA116, 200, 2, 3);
    return eval_multi_;
  }
  const std::vector<task::TaskInstance>& failure_set() {
    if (failure_set_.empty()) failure_set_ = gen_set(0xA118, 500, 2, 4);
    return failure_set_;
  }

  // Supervised model plus its held-out accuracy and training wall time.
  const Weights& sft_model() {
    if (!sft_) build_sft();
    return *sft_;
  }
  double sft_heldout_acc() {
    sft_model();
    return sft_acc_;
  }
  double sft_elapsed_s() {
    sft_model();
    return sft_elapsed_;
  }

  const std::vector<task::TaskInstance>& curated() {
    if (curated_.empty()) build_curated();
    return curated_;
  }

  // The supervised weights under the deployment streaming geometry. At the
  // training geometry (sink 8, local 16) these task lengths stream losslessly,
  // so gates would see no reward signal at all; RL runs at sink 4, local 8,
  // where compression measurably hurts. Weight tensors are identical, only
  // the streaming-branch window of the config changes.
  const Weights& rl_weights() {
    if (!rl_weights_) {
      ModelConfig mc = model_;
      mc.sink_train = 4;
      mc.local_train = 8;
      rl_weights_.emplace(mc, 0);
      auto dst = rl_weights_->named();
      auto src = sft_model().named();
      if (dst.size() != src.size()) throw std::logic_error("weight listing mismatch");
      for (std::size_t i = 0; i < dst.size(); ++i) {
        Tensor& d = dst[i].second;
        const Tensor* s = src[i].second;
        if (dst[i].first != src[i].first || d.numel() != s->numel())
          throw std::logic_error("weight tensor mismatch at " + dst[i].first);
        std::copy(s->data(), s->data() + s->numel(), d.data());
      }
      rl_weights_->set_trainable(false);
    }
    return *rl_weights_;
  }

  struct RlRun {
    GatingAdapters adapters{1, 1};
    std::vector<RlStepMetrics> history;
    double heldout_acc = 0.0;  // gated greedy accuracy on the supervised held-out set
    double elapsed_s = 0.0;
  };

  const RlRun& rl_adaptive() {
    if (!rl_adaptive_) rl_adaptive_ = build_rl(true);
    return *rl_adaptive_;
  }
  const RlRun& rl_constant() {
    if (!rl_constant_) rl_constant_ = build_rl(false);
    return *rl_constant_;
  }

  fs::path subdir(const std::string& name) {
    fs::path p = dir_ / name;
    fs::create_directories(p);
    return p;
  }

 private:
  static constexpr std::uint64_t kMaster = 0xACCE11CEull;

  std::vector<task::TaskInstance> gen_set(std::uint64_t stream, int count, int min_steps,
                                          int max_steps) {
    Rng steps(derive_seed(kMaster, stream, 0));
    std::vector<task::TaskInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int n = steps.next_int(min_steps, max_steps);
      out.push_back(task::gen_instance(derive_seed(kMaster, stream + 1, static_cast<std::uint64_t>(i)),
                                       n, 10));
    }
    return out;
  }

  void build_sft() {
    const fs::path ckpt = dir_ / "sft.ckpt";
    const fs::path meta = dir_ / "sft_meta.txt";
    if (resume_ && fs::exists(ckpt) && fs::exists(meta)) {
      try {
        Checkpoint c = load_checkpoint(ckpt.string());
        if (c.config == model_ && c.provenance.stage == "acceptance-sft") {
          sft_.emplace(weights_from_checkpoint(c));
          std::ifstream in(meta);
          in >> sft_acc_ >> sft_elapsed_;
          if (in) {
            std::cerr << "  [fixture] reusing supervised checkpoint from " << ckpt << "\n";
            return;
          }
          sft_.reset();
        }
      } catch (const std::exception&) {
        // stale or foreign checkpoint: retrain below
      }
    }
    std::cerr << "  [fixture] training supervised model (" << sft_train().size()
              << " instances, " << sft_cfg_.epochs << " epochs)\n";
    const auto t0 = std::chrono::steady_clock::now();
    sft_.emplace(model_, derive_seed(kMaster, 0xA200));
    run_sft(sft_train(), *sft_, sft_cfg_, [](int epoch, float loss) {
      std::cerr << "  [fixture] epoch " << epoch << " loss " << loss << "\n";
    });
    sft_elapsed_ = seconds_since(t0);
    sft_acc_ = eval_exact_match(sft_heldout(), *sft_, 48);
    std::cerr << "  [fixture] supervised held-out accuracy " << sft_acc_ << " after "
              << fmt("%.1f", sft_elapsed_) << "s\n";
    save_checkpoint(ckpt.string(), make_checkpoint(*sft_, nullptr,
                                                   {"acceptance-sft", sft_cfg_.epochs,
                                                    config_hash(model_)}));
    std::ofstream out(meta);
    out << sft_acc_ << " " << sft_elapsed_ << "\n";
  }

  void build_curated() {
    const fs::path path = dir_ / "curated.jsonl";
    if (resume_ && fs::exists(path)) {
      curated_ = task::read_dataset(path.string());
      if (!curated_.empty()) {
        std::cerr << "  [fixture] reusing curated set (" << curated_.size() << ")\n";
        return;
      }
    }
    std::cerr << "  [fixture] curating RL data from a " << pool().size() << "-instance pool\n";
    DistillResult d = self_distill_filter(pool(), sft_model(), default_bucket_weights(), 256,
                                          derive_seed(kMaster, 0xA203), rl_cfg_.max_new);
    curated_ = std::move(d.instances);
    std::cerr << "  [fixture] solvable " << d.solvable_count << ", curated " << curated_.size()
              << (d.underfilled ? " (underfilled)" : "") << "\n";
    if (curated_.empty()) throw std::runtime_error("curation produced an empty RL set");
    task::write_dataset(path.string(), curated_);
  }

  RlRun build_rl(bool adaptive) {
    const std::string tag = adaptive ? "adaptive" : "constant";
    const fs::path ckpt = dir_ / ("rl_" + tag + ".ckpt");
    const fs::path hist = dir_ / ("rl_" + tag + ".jsonl");
    const fs::path meta = dir_ / ("rl_" + tag + "_meta.txt");
    GrpoConfig cfg = rl_cfg_;
    cfg.adaptive_penalty = adaptive;

    const Weights& w = rl_weights();
    RlRun run;
    if (resume_ && fs::exists(ckpt) && fs::exists(hist) && fs::exists(meta)) {
      try {
        Checkpoint c = load_checkpoint(ckpt.string());
        auto adapters = adapters_from_checkpoint(c);
        if (c.config == w.config() && adapters && c.provenance.stage == "acceptance-rl-" + tag) {
          run.adapters = std::move(*adapters);
          std::ifstream in(hist);
          std::string line;
          while (std::getline(in, line)) {
            if (line.empty()) continue;
            MetricsRecord r = parse_metrics_line(line);
            RlStepMetrics m;
            m.step = r.step;
            m.mean_reward = r.mean_reward;
            m.alpha_mean = static_cast<float>(r.alpha_mean);
            m.alpha_sparsity = static_cast<float>(r.alpha_sparsity_frac);
            m.beta_eff = r.beta_eff;
            m.objective = r.objective;
            run.history.push_back(m);
          }
          std::ifstream mi(meta);
          mi >> run.heldout_acc >> run.elapsed_s;
          if (mi && !run.history.empty()) {
            std::cerr << "  [fixture] reusing " << tag << " RL run from " << ckpt << "\n";
            return run;
          }
        }
      } catch (const std::exception&) {
        // retrain below
      }
      run = RlRun{};
    }

    std::cerr << "  [fixture] RL run (" << tag << " penalty, " << cfg.steps << " steps)\n";
    const auto t0 = std::chrono::steady_clock::now();
    GatingAdapters adapters(model_.n_layers, model_.n_kv_heads);
    std::vector<RlStepMetrics> history =
        run_rl(curated(), w, adapters, cfg, [&](const RlStepMetrics& m) {
          if (m.step % 20 == 0 || m.step == cfg.steps - 1) {
            std::cerr << "  [fixture] " << tag << " step " << m.step << " reward "
                      << fmt("%.3f", m.mean_reward) << " alpha_mean " << fmt("%.3f", m.alpha_mean)
                      << " sparsity " << fmt("%.3f", m.alpha_sparsity) << "\n";
          }
        });
    run.elapsed_s = seconds_since(t0);
    run.adapters = adapters.copy();
    run.history = std::move(history);
    run.heldout_acc = eval_exact_match(sft_heldout(), w, 48, &run.adapters);
    std::cerr << "  [fixture] " << tag << " gated held-out accuracy "
              << fmt("%.4f", run.heldout_acc) << " after " << fmt("%.1f", run.elapsed_s) << "s\n";

    save_checkpoint(ckpt.string(),
                    make_checkpoint(w, &run.adapters,
                                    {"acceptance-rl-" + tag, cfg.steps, config_hash(w.config())}));
    MetricsWriter writer(hist.string(), false);
    for (const RlStepMetrics& m : run.history) {
      MetricsRecord r;
      r.stage = "rl-" + tag;
      r.step = m.step;
      r.mean_reward = m.mean_reward;
      r.alpha_mean = m.alpha_mean;
      r.alpha_sparsity_frac = m.alpha_sparsity;
      r.beta_eff = m.beta_eff;
      r.objective = m.objective;
      r.wall_clock_ms = 0;
      writer.write(r);
    }
    std::ofstream out(meta);
    out << run.heldout_acc << " " << run.elapsed_s << "\n";
    return run;
  }

  fs::path dir_;
  bool resume_ = false;
  ModelConfig model_;  // library defaults throughout
  SftConfig sft_cfg_;
  GrpoConfig rl_cfg_;

  std::vector<task::TaskInstance> sft_train_, sft_heldout_, pool_, eval_multi_, failure_set_;
  std::optional<Weights> sft_;
  std::optional<Weights> rl_weights_;
  double sft_acc_ = 0.0;
  double sft_elapsed_ = 0.0;
  std::vector<task::TaskInstance> curated_;
  std::optional<RlRun> rl_adaptive_, rl_constant_;
};

// ---------------------------------------------------------------------------
// C1: the backward gradient of the clipped-surrogate reward term with respect
// to every gate entry matches central finite differences at step 1e-3 within
// relative error 1e-3, on a 2-layer 2-KV-head model and a fixed rollout group.
//
// The model is briefly warmed up first: on random weights the full and
// streaming branches produce near-identical logits, leaving gate gradients
// below the float32 noise floor of the finite-difference quotient. Sequence-
// level ratios are used for the same reason: per-token averaging divides each
// gradient by the output length.

Outcome c1_gradcheck(Fixture&) {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_query_heads = 4;
  mc.n_kv_heads = 2;
  mc.head_dim = 8;
  mc.ff_dim = 64;
  mc.vocab_size = 24;
  mc.max_seq_len = 96;
  mc.sink_train = 2;
  mc.local_train = 4;
  Weights weights(mc, 0xC1F00Dull);
  {
    std::vector<task::TaskInstance> warmup;
    Rng steps(0x71AAull);
    for (int i = 0; i < 64; ++i)
      warmup.push_back(task::gen_instance(derive_seed(0x71BBull, 0, static_cast<std::uint64_t>(i)),
                                          steps.next_int(1, 3), 10));
    SftConfig sc;
    sc.epochs = 24;
    sc.learning_rate = 1e-3f;
    sc.seed = 0x5F7ull;
    run_sft(warmup, weights, sc);
  }
  weights.set_trainable(false);

  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.max_new = 24;
  cfg.ratio_mode = RatioMode::Sequence;
  task::TaskInstance inst = task::gen_instance(0xFACE01ull, 3, 10);

  GatingAdapters sampler(Tensor::from_data({2, 2}, {0.62f, 0.45f, 0.50f, 0.71f}));
  RolloutGroup group = rollout_group(inst, weights, sampler, cfg, 0x1111ull);
  group.rewards = {1.0f, 0.0f, 0.0f, 1.0f};
  group.advantages = compute_advantages(group.rewards);
  group.mean_reward = 0.5;

  Tensor point = Tensor::from_data({2, 2}, {0.62f, 0.45f, 0.50f, 0.71f}, true);
  GatingAdapters adapters(point);
  Tensor obj = grpo_objective(group, adapters, weights, cfg);
  backward(obj);
  if (!point.grad_allocated()) return {false, "no gradient reached the gates"};

  const auto value_at = [&](const Tensor& alpha) {
    GatingAdapters probe(alpha);
    return static_cast<double>(grpo_objective(group, probe, weights, cfg).item());
  };
  Tensor fd = finite_diff_grad(value_at, point, 1e-3f);

  double max_rel = 0.0;
  double min_abs = 1e300;
  for (std::int64_t i = 0; i < point.numel(); ++i) {
    const double got = point.grad_data()[i];
    const double want = fd.data()[i];
    min_abs = std::min(min_abs, std::abs(want));
    if (want == 0.0) return {false, "finite-difference gradient entry is exactly zero"};
    max_rel = std::max(max_rel, std::abs(got - want) / std::abs(want));
  }
  std::string detail = "max rel err " + fmt("%.2e", max_rel) + " over 4 gate entries (min |g| " +
                       fmt("%.2e", min_abs) + ")";
  return {max_rel <= 1e-3, detail};
}

// ---------------------------------------------------------------------------
// C2: the gated attention blend reproduces the full branch at gate 1 and the
// streaming branch at gate 0, within 1e-6 elementwise, over 100 seeded inputs.

Outcome c2_gate_endpoints(Fixture&) {
  const int t = 24;
  const int hd = 8;
  const int sink = 3;
  const int local = 5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(0xC2u, 0, static_cast<std::uint64_t>(trial)));
    auto randn = [&](int rows, int cols) {
      Tensor x = Tensor::zeros({rows, cols});
      for (std::int64_t i = 0; i < x.numel(); ++i)
        x.data()[i] = static_cast<float>(rng.next_normal());
      return x;
    };
    Tensor q = randn(t, hd);
    Tensor k = randn(t, hd);
    Tensor v = randn(t, hd);

    Tensor full = attention_head(q, k, v, causal_mask(t));
    Tensor stream = attention_head(q, k, v, streaming_mask(t, sink, local));
    Tensor at_one = mixed_attention(q, k, v, Tensor::from_data({1}, {1.0f}), sink, local);
    Tensor at_zero = mixed_attention(q, k, v, Tensor::from_data({1}, {0.0f}), sink, local);

    for (std::int64_t i = 0; i < full.numel(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(at_one.data()[i] - full.data()[i])));
      worst = std::max(worst, static_cast<double>(std::abs(at_zero.data()[i] - stream.data()[i])));
    }
  }
  return {worst <= 1e-6, "max endpoint deviation " + fmt("%.2e", worst) + " across 100 inputs"};
}

// ---------------------------------------------------------------------------
// C3: the adaptive penalty weight hits its three anchor values.

Outcome c3_penalty_anchors(Fixture&) {
  struct Anchor {
    double mean_reward, expected;
  };
  const Anchor anchors[] = {{0.4, 0.0}, {0.7, 1.01375e-3}, {1.0, 1.71828e-3}};
  double worst = 0.0;
  std::string vals;
  for (const Anchor& a : anchors) {
    const double got = adaptive_beta(a.mean_reward, 0.5, 0.001);
    worst = std::max(worst, std::abs(got - a.expected));
    if (!vals.empty()) vals += ", ";
    vals += fmt("%.6e", got);
  }
  return {worst <= 1e-8, "beta(0.4, 0.7, 1.0) = " + vals + ", max anchor err " + fmt("%.1e", worst)};
}

// ---------------------------------------------------------------------------
// C4: group advantage normalization over 10,000 random reward lists.

Outcome c4_advantages(Fixture&) {
  Rng rng(0xC4ull);
  int nondegenerate = 0;
  int degenerate = 0;
  double worst_mean = 0.0;
  double worst_std = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = rng.next_int(2, 16);
    std::vector<float> rewards(static_cast<std::size_t>(n));
    const int flavor = trial % 3;
    for (float& r : rewards) {
      if (flavor == 0) r = static_cast<float>(rng.next_double());
      else if (flavor == 1) r = rng.next_below(2) ? 1.0f : 0.0f;
      else r = 0.25f * static_cast<float>(rng.next_int(0, 3));
    }
    if (trial % 10 == 0) std::fill(rewards.begin(), rewards.end(), rewards[0]);

    double mean = 0.0;
    for (float r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (float r : rewards) var += (r - mean) * (r - mean);
    const double std_dev = std::sqrt(var / n);

    const std::vector<double> adv = compute_advantages(rewards);
    if (adv.size() != rewards.size()) return {false, "advantage length mismatch"};
    if (std_dev < 1e-6) {
      ++degenerate;
      for (double a : adv)
        if (a != 0.0) return {false, "degenerate group produced a nonzero advantage"};
      continue;
    }
    ++nondegenerate;
    double a_mean = 0.0;
    for (double a : adv) a_mean += a;
    a_mean /= n;
    double a_var = 0.0;
    for (double a : adv) a_var += (a - a_mean) * (a - a_mean);
    const double a_std = std::sqrt(a_var / n);
    worst_mean = std::max(worst_mean, std::abs(a_mean));
    worst_std = std::max(worst_std, std::abs(a_std - 1.0));
  }
  const bool covered = nondegenerate >= 1000 && degenerate >= 1000;
  std::string detail = std::to_string(nondegenerate) + " normalized / " +
                       std::to_string(degenerate) + " degenerate, worst |mean| " +
                       fmt("%.1e", worst_mean) + ", worst |std-1| " + fmt("%.1e", worst_std);
  return {covered && worst_mean <= 1e-6 && worst_std <= 1e-6, detail};
}

// ---------------------------------------------------------------------------
// C5: the default-config model reaches 95% exact match on held-out one-to-
// three-step chains, inside the stated single-core budget.

Outcome c5_supervised_accuracy(Fixture& fx) {
  const double acc = fx.sft_heldout_acc();
  const double elapsed = fx.sft_elapsed_s();
  const double budget = 15.0 * 60.0 * 8.0;
  std::string detail = "held-out exact match " + fmt("%.4f", acc) + " (need >= 0.95), trained in " +
                       fmt("%.1f", elapsed) + "s of " + fmt("%.0f", budget) + "s budget";
  return {acc >= 0.95 && elapsed <= budget, detail};
}

// ---------------------------------------------------------------------------
// C6: the adaptive-penalty RL run sparsifies at least 30% of the gates while
// gated held-out accuracy stays within 2 points of the pre-RL model, and the
// constant-penalty ablation ends strictly worse on reward or accuracy.

Outcome c6_rl_runs(Fixture& fx) {
  const auto t0 = std::chrono::steady_clock::now();
  const double pre_acc = fx.sft_heldout_acc();
  const Fixture::RlRun& ada = fx.rl_adaptive();
  const Fixture::RlRun& con = fx.rl_constant();
  const double elapsed = seconds_since(t0);

  if (ada.history.empty() || con.history.empty()) return {false, "an RL run produced no steps"};
  const RlStepMetrics& ada_last = ada.history.back();
  const RlStepMetrics& con_last = con.history.back();

  const bool sparsified = ada_last.alpha_sparsity >= 0.30f;
  const bool held = std::abs(ada.heldout_acc - pre_acc) <= 0.02 + 1e-12;
  const bool ablation_worse =
      con_last.mean_reward < ada_last.mean_reward || con.heldout_acc < ada.heldout_acc;
  const double fresh_budget = 3600.0;
  const bool in_budget = ada.elapsed_s + con.elapsed_s <= fresh_budget;

  std::string detail = "final sparsity " + fmt("%.3f", ada_last.alpha_sparsity) +
                       " (need >= 0.30); gated acc " + fmt("%.4f", ada.heldout_acc) + " vs pre-RL " +
                       fmt("%.4f", pre_acc) + "; constant-penalty reward " +
                       fmt("%.3f", con_last.mean_reward) + " vs " + fmt("%.3f", ada_last.mean_reward) +
                       ", acc " + fmt("%.4f", con.heldout_acc) + "; " + fmt("%.0f", elapsed) +
                       "s this invocation";
  return {sparsified && held && ablation_worse && in_budget, detail};
}

// ---------------------------------------------------------------------------
// C7: masking the top-ranked quarter of heads hurts more than masking the
// same number of random heads, averaged over 5 seeds, by a positive margin.

Outcome c7_top_head_masking(Fixture& fx) {
  const int sink = 4;
  const int local = 8;
  const ModelConfig& mc = fx.model();
  HeadRanking ranking = rank_heads(fx.rl_adaptive().adapters);
  CachePolicy masked = mask_top_heads(ranking, 0.25f, sink, local);
  const int streamed = masked.count(CacheKind::Streaming);

  const double masked_acc =
      eval_exact_match(fx.eval_multi(), fx.sft_model(), 48, nullptr, &masked);

  double random_sum = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(0xC7ull, 0, static_cast<std::uint64_t>(s)));
    CachePolicy control = CachePolicy::all_full(mc.n_layers, mc.n_kv_heads);
    for (int idx : rng.sample_without_replacement(mc.n_layers * mc.n_kv_heads, streamed)) {
      control.at(idx / mc.n_kv_heads, idx % mc.n_kv_heads) =
          HeadPolicy::streaming(sink, local);
    }
    random_sum += eval_exact_match(fx.eval_multi(), fx.sft_model(), 48, nullptr, &control);
  }
  const double random_acc = random_sum / seeds;
  const double margin = random_acc - masked_acc;

  std::string detail = "masked-top accuracy " + fmt("%.4f", masked_acc) + ", random-mask mean " +
                       fmt("%.4f", random_acc) + " over 5 seeds at " + std::to_string(streamed) +
                       " heads; margin " + fmt("%.4f", margin);
  return {margin > 0.0, detail};
}

// ---------------------------------------------------------------------------
// C8: at half the heads compressed, the learned ranking beats both random
// head choice and score-based eviction at a matched memory budget.

Outcome c8_deployment_comparison(Fixture& fx) {
  const int sink = 4;
  const int local = 8;
  const int window = 8;
  const int max_new = 48;
  const ModelConfig& mc = fx.model();
  HeadRanking ranking = rank_heads(fx.rl_adaptive().adapters);
  CachePolicy deploy = policy_for_sparsity(ranking, 0.5f, sink, local);
  const double deploy_acc =
      eval_exact_match(fx.eval_multi(), fx.sft_model(), 48, nullptr, &deploy);

  double random_sum = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    CachePolicy control = random_policy(0.5f, mc.n_layers, mc.n_kv_heads, sink, local,
                                        derive_seed(0xC8ull, 0, static_cast<std::uint64_t>(s)));
    random_sum += eval_exact_match(fx.eval_multi(), fx.sft_model(), 48, nullptr, &control);
  }
  const double random_acc = random_sum / seeds;

  // memory-matched eviction baseline at a reference decode length
  double mean_qlen = 0.0;
  for (const auto& inst : fx.eval_multi()) mean_qlen += static_cast<double>(inst.question.size());
  mean_qlen /= static_cast<double>(fx.eval_multi().size());
  const int t_ref = static_cast<int>(std::lround(mean_qlen)) + max_new;
  const MemoryReport dep_mem = kv_memory_bytes(deploy, t_ref, mc.head_dim, 4);
  const long long kept_total = dep_mem.total_bytes / (2LL * mc.head_dim * 4);
  const int n_heads = mc.n_layers * mc.n_kv_heads;
  const double per_head = static_cast<double>(kept_total) / n_heads;
  const double budget_frac =
      std::clamp((per_head - window) / static_cast<double>(t_ref), 1e-4, 1.0);
  CachePolicy evict =
      CachePolicy::all_score_evict(mc.n_layers, mc.n_kv_heads, budget_frac, window);
  const double evict_acc = eval_exact_match(fx.eval_multi(), fx.sft_model(), 48, nullptr, &evict);

  std::string detail = "ranked " + fmt("%.4f", deploy_acc) + " vs random " + fmt("%.4f", random_acc) +
                       " (5 seeds) vs eviction " + fmt("%.4f", evict_acc) + " at budget_frac " +
                       fmt("%.3f", budget_frac);
  return {deploy_acc >= random_acc && deploy_acc >= evict_acc, detail};
}

// ---------------------------------------------------------------------------
// C9: exact cache accounting for streaming heads.

Outcome c9_memory_accounting(Fixture&) {
  CachePolicy one(1, 1, HeadPolicy::streaming(16, 64));
  const MemoryReport single = kv_memory_bytes(one, 1000, 8, 4);
  const bool per_head_ok = single.per_head_bytes.size() == 1 && single.per_head_bytes[0] == 5120;

  CachePolicy all = CachePolicy::all_streaming(4, 4, 16, 64);
  const std::int64_t t80 = kv_memory_bytes(all, 80, 8, 4).total_bytes;
  const std::int64_t t1000 = kv_memory_bytes(all, 1000, 8, 4).total_bytes;
  const std::int64_t t5000 = kv_memory_bytes(all, 5000, 8, 4).total_bytes;
  const bool plateau = t80 == t1000 && t1000 == t5000;

  std::string detail = "Streaming{16,64} at length 1000: " +
                       std::to_string(single.per_head_bytes.empty() ? -1 : single.per_head_bytes[0]) +
                       " bytes/head (want 5120); all-streaming totals at 80/1000/5000: " +
                       std::to_string(t80) + "/" + std::to_string(t1000) + "/" +
                       std::to_string(t5000);
  return {per_head_ok && plateau, detail};
}

// ---------------------------------------------------------------------------
// C10: two pipeline runs under an identical config and seed produce byte-
// identical metrics (timing field zeroed) and byte-identical head rankings.

ExperimentConfig c10_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 23;
  cfg.out_dir = out_dir;
  cfg.model.max_seq_len = 96;
  cfg.tasks.value_modulus = 2;
  cfg.tasks.sft_train = 48;
  cfg.tasks.sft_heldout = 8;
  cfg.tasks.sft_min_steps = 1;
  cfg.tasks.sft_max_steps = 1;
  cfg.tasks.pool = 16;
  cfg.tasks.pool_min_steps = 1;
  cfg.tasks.pool_max_steps = 1;
  cfg.tasks.distill_target = 8;
  cfg.tasks.eval_heldout = 8;
  cfg.tasks.eval_min_steps = 1;
  cfg.tasks.eval_max_steps = 1;
  cfg.sft.epochs = 60;
  cfg.sft.learning_rate = 3e-3f;
  cfg.rl.steps = 4;
  cfg.rl.group_size = 2;
  cfg.rl.groups_per_step = 2;
  cfg.rl.max_new = 12;
  cfg.eval.max_new = 12;
  cfg.eval.sink = 2;
  cfg.eval.local = 4;
  cfg.eval.sparsity_grid = {0.5f};
  cfg.eval.random_seeds = 2;
  return cfg;
}

std::string metrics_modulo_time(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricsRecord r = parse_metrics_line(line);
    r.wall_clock_ms = 0;
    out << metrics_line(r) << "\n";
  }
  return out.str();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome c10_determinism(Fixture& fx) {
  std::ostringstream log;
  const fs::path a = fx.subdir("c10_a");
  const fs::path b = fx.subdir("c10_b");
  fs::remove_all(a);
  fs::remove_all(b);
  const int rc_a = run_pipeline(c10_config(a.string()), log);
  const int rc_b = run_pipeline(c10_config(b.string()), log);
  if (rc_a != 0 || rc_b != 0)
    return {false, "pipeline exit codes " + std::to_string(rc_a) + "/" + std::to_string(rc_b) +
                       "; log tail: " + log.str().substr(log.str().size() > 300
                                                             ? log.str().size() - 300
                                                             : 0)};
  RunPaths pa = run_paths(a.string());
  RunPaths pb = run_paths(b.string());
  const bool metrics_same = metrics_modulo_time(pa.metrics) == metrics_modulo_time(pb.metrics);
  const bool ranking_same = slurp(pa.ranking) == slurp(pb.ranking);
  std::string detail = std::string("metrics streams ") +
                       (metrics_same ? "identical" : "DIFFER") + " (timing field zeroed), rankings " +
                       (ranking_same ? "byte-identical" : "DIFFER");
  return {metrics_same && ranking_same, detail};
}

// ---------------------------------------------------------------------------
// C11: every failed generation in a 500-instance compressed-cache evaluation
// lands in exactly one failure class.

Outcome c11_failure_taxonomy(Fixture& fx) {
  const ModelConfig& mc = fx.model();
  const Weights& w = fx.sft_model();
  CachePolicy policy = CachePolicy::all_streaming(mc.n_layers, mc.n_kv_heads, 4, 8);
  const int max_new = 48;

  GenerateOptions opt;
  opt.max_new = max_new;
  opt.temperature = 0.0f;
  opt.eos_id = task::kEos;

  ErrorHistogram hist;
  int mismatches = 0;
  for (const task::TaskInstance& inst : fx.failure_set()) {
    DecodeResult out = generate(w, inst.question, opt, nullptr, &policy);
    std::vector<int> text = inst.question;
    text.insert(text.end(), out.tokens.begin(), out.tokens.end());
    const float reward = task::verify_reward(text, inst);
    const task::ErrorMode mode = task::classify_error(out.tokens, inst, max_new);
    switch (mode) {
      case task::ErrorMode::None: ++hist.none; break;
      case task::ErrorMode::Repetitive: ++hist.repetitive; break;
      case task::ErrorMode::Incorrect: ++hist.incorrect; break;
      case task::ErrorMode::Overlength: ++hist.overlength; break;
    }
    // a failure classified as clean (or vice versa) is an unclassified case
    if ((reward == 1.0f) != (mode == task::ErrorMode::None)) ++mismatches;
  }
  const int failures = hist.repetitive + hist.incorrect + hist.overlength;
  const bool partitioned = hist.total() == 500 && mismatches == 0;
  std::string detail = "500 instances: " + std::to_string(hist.none) + " clean, " +
                       std::to_string(hist.repetitive) + " repetitive, " +
                       std::to_string(hist.incorrect) + " incorrect, " +
                       std::to_string(hist.overlength) + " overlength; " +
                       std::to_string(mismatches) + " unclassified";
  return {partitioned && failures > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  fs::path work_dir = fs::temp_directory_path() / "rlkv-acceptance";
  bool resume = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else if (arg == "--work-dir" && i + 1 < argc) {
      work_dir = argv[++i];
    } else if (arg == "--resume") {
      resume = true;
    } else {
      std::cerr << "unknown argument: " << arg << "\n";
      return 2;
    }
  }

  Fixture fx(work_dir, resume);

  struct Check {
    int id;
    const char* label;
    Outcome (*fn)(Fixture&);
  };
  const Check checks[] = {
      {1, "gate gradient matches central finite differences", c1_gradcheck},
      {2, "gated attention reproduces its endpoint branches", c2_gate_endpoints},
      {3, "adaptive penalty weight anchor values", c3_penalty_anchors},
      {4, "group advantage normalization over 10,000 reward lists", c4_advantages},
      {5, "default-config model reaches 95% held-out exact match", c5_supervised_accuracy},
      {6, "adaptive RL sparsifies without collapse, constant penalty ends worse", c6_rl_runs},
      {7, "masking top-ranked heads hurts more than random masks", c7_top_head_masking},
      {8, "learned ranking beats random and eviction at matched memory", c8_deployment_comparison},
      {9, "streaming cache accounting is exact and length-independent", c9_memory_accounting},
      {10, "identical config and seed reproduce metrics and rankings", c10_determinism},
      {11, "every failed generation lands in one failure class", c11_failure_taxonomy},
  };

  int failures = 0;
  for (const Check& c : checks) {
    if (!only.empty() && !only.count(c.id)) {
      std::cout << "[SKIP] C" << c.id << ": " << c.label << "\n";
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.fn(fx);
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (!out.pass) ++failures;
    std::cout << (out.pass ? "[PASS]" : "[FAIL]") << " C" << c.id << ": " << c.label << " -- "
              << out.detail << " [" << fmt("%.1f", secs) << "s]\n";
    std::cout.flush();
  }

  const int executed = only.empty() ? 11 : static_cast<int>(only.size());
  std::cout << "acceptance: " << (executed - failures) << "/" << executed << " checks passed\n";
  return failures == 0 ? 0 : 1;
}
