#include "rlkv/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlkv/checkpoint.hpp"
#include "rlkv/eval.hpp"
#include "rlkv/grpo.hpp"
#include "rlkv/head_selection.hpp"
#include "rlkv/metrics.hpp"
#include "rlkv/rng.hpp"
#include "rlkv/sft.hpp"

namespace rlkv {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// One seed stream per consumer so no two stages share randomness.
constexpr std::uint32_t kSftTrainStepsStream = 0x7101;
constexpr std::uint32_t kSftTrainDataStream = 0x7102;
constexpr std::uint32_t kSftHeldoutStepsStream = 0x7103;
constexpr std::uint32_t kSftHeldoutDataStream = 0x7104;
constexpr std::uint32_t kPoolStepsStream = 0x7105;
constexpr std::uint32_t kPoolDataStream = 0x7106;
constexpr std::uint32_t kEvalStepsStream = 0x7107;
constexpr std::uint32_t kEvalDataStream = 0x7108;
constexpr std::uint32_t kModelInitStream = 0x7200;
constexpr std::uint32_t kSftSeedStream = 0x7201;
constexpr std::uint32_t kRlSeedStream = 0x7202;
constexpr std::uint32_t kEvalRandomStream = 0x7203;
constexpr std::uint32_t kImportanceStream = 0x7204;

constexpr const char* kStageNames[kStageCount] = {
    "gen-data", "sft",           "distill",          "rl",     "rank",
    "eval",     "baseline-eval", "importance-study", "report",
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::int64_t ms_between(std::chrono::steady_clock::time_point a,
                        std::chrono::steady_clock::time_point b) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(b - a).count();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out.flush()) throw std::runtime_error("write to " + path + " failed");
}

std::vector<task::TaskInstance> gen_split(const ExperimentConfig& cfg, int count, int min_steps,
                                          int max_steps, std::uint32_t steps_stream,
                                          std::uint32_t data_stream) {
  Rng steps_rng(derive_seed(cfg.seed, steps_stream));
  std::vector<task::TaskInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int n = steps_rng.next_int(min_steps, max_steps);
    out.push_back(task::gen_instance(derive_seed(cfg.seed, data_stream, static_cast<std::uint64_t>(i)),
                                     n, cfg.tasks.value_modulus));
  }
  return out;
}

Checkpoint load_stage_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                                 const std::string& expected_stage) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.config == cfg.model)) {
    throw std::runtime_error("checkpoint " + path + ": model config does not match the run config");
  }
  if (ckpt.provenance.stage != expected_stage) {
    throw std::runtime_error("checkpoint " + path + ": stage \"" + ckpt.provenance.stage +
                             "\" where \"" + expected_stage + "\" was expected");
  }
  return ckpt;
}

GatingAdapters require_adapters(const Checkpoint& ckpt, const std::string& path) {
  std::optional<GatingAdapters> adapters = adapters_from_checkpoint(ckpt);
  if (!adapters) throw std::runtime_error("checkpoint " + path + ": carries no adapter tensor");
  return std::move(*adapters);
}

// Rewrites the metrics file without the given stage's lines, so a rerun after
// a mid-stage failure does not leave a stale partial stream in front of the
// fresh one.
void drop_stage_lines(const std::string& path, const std::string& stage) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    bool drop = true;
    try {
      drop = parse_metrics_line(line).stage == stage;
    } catch (const std::exception&) {
      // malformed line, drop it
    }
    if (!drop) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const std::string& l : kept) out << l << '\n';
}

struct EvalRow {
  std::string method;
  float sparsity = 0.0f;
  int seed = -1;
  EvalResult result;
};

std::string eval_rows_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream out;
  out << "method,sparsity,seed,count,accuracy,mean_generated,mean_kv_bytes,"
         "err_none,err_repetitive,err_incorrect,err_overlength\n";
  for (const EvalRow& r : rows) {
    out << r.method << ',' << fmt("%.2f", r.sparsity) << ',' << r.seed << ',' << r.result.count
        << ',' << fmt("%.6f", r.result.accuracy) << ',' << fmt("%.4f", r.result.mean_generated)
        << ',' << fmt("%.2f", r.result.mean_kv_bytes) << ',' << r.result.errors.none << ','
        << r.result.errors.repetitive << ',' << r.result.errors.incorrect << ','
        << r.result.errors.overlength << '\n';
  }
  return out.str();
}

// Minimal reader for the comma-separated tables this pipeline writes; no
// quoting, first line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    throw std::runtime_error("csv column \"" + name + "\" not found");
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty csv");
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    table.rows.push_back(split_csv_line(line));
  }
  return table;
}

void stage_gen_data(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const TaskGenConfig& t = cfg.tasks;
  const auto train = gen_split(cfg, t.sft_train, t.sft_min_steps, t.sft_max_steps,
                               kSftTrainStepsStream, kSftTrainDataStream);
  const auto heldout = gen_split(cfg, t.sft_heldout, t.sft_min_steps, t.sft_max_steps,
                                 kSftHeldoutStepsStream, kSftHeldoutDataStream);
  const auto pool =
      gen_split(cfg, t.pool, t.pool_min_steps, t.pool_max_steps, kPoolStepsStream, kPoolDataStream);
  const auto eval_set = gen_split(cfg, t.eval_heldout, t.eval_min_steps, t.eval_max_steps,
                                  kEvalStepsStream, kEvalDataStream);
  task::write_dataset(paths.sft_train, train);
  task::write_dataset(paths.sft_heldout, heldout);
  task::write_dataset(paths.pool, pool);
  task::write_dataset(paths.eval_heldout, eval_set);
  log << "wrote " << train.size() << " train, " << heldout.size() << " heldout, " << pool.size()
      << " pool, " << eval_set.size() << " eval instances\n";
}

void stage_sft(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const auto train = task::read_dataset(paths.sft_train);
  const auto heldout = task::read_dataset(paths.sft_heldout);

  Weights weights(cfg.model, derive_seed(cfg.seed, kModelInitStream));
  SftConfig sft_cfg = cfg.sft;
  sft_cfg.seed = derive_seed(cfg.seed, kSftSeedStream);

  MetricsWriter writer(paths.metrics, /*append=*/false);
  auto last = std::chrono::steady_clock::now();
  run_sft(train, weights, sft_cfg, [&](int epoch, float loss) {
    const auto now = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.stage = "sft";
    rec.step = epoch;
    rec.mean_reward = 0.0;
    rec.alpha_mean = 1.0;
    rec.alpha_sparsity_frac = 0.0;
    rec.beta_eff = 0.0;
    rec.objective = static_cast<double>(loss);
    rec.wall_clock_ms = ms_between(last, now);
    last = now;
    writer.write(rec);
    log << "sft epoch " << epoch << " loss " << fmt("%.4f", loss) << "\n";
  });

  const double acc = eval_exact_match(heldout, weights, cfg.eval.max_new);
  log << "sft heldout exact match " << fmt("%.4f", acc) << "\n";

  CheckpointProvenance prov;
  prov.stage = "sft";
  prov.step_count = cfg.sft.epochs;
  prov.config_hash = config_hash(cfg.model);
  save_checkpoint(paths.sft_checkpoint, make_checkpoint(weights, nullptr, prov));
}

void stage_distill(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.sft_checkpoint, cfg, "sft");
  const Weights weights = weights_from_checkpoint(ckpt);
  const auto pool = task::read_dataset(paths.pool);

  const DistillResult result = self_distill_filter(pool, weights, default_bucket_weights(),
                                                   cfg.tasks.distill_target, cfg.seed, cfg.rl.max_new);
  task::write_dataset(paths.curated, result.instances);

  json meta;
  meta["target"] = cfg.tasks.distill_target;
  meta["solvable"] = result.solvable_count;
  meta["selected"] = result.instances.size();
  meta["underfilled"] = result.underfilled;
  meta["bucket_counts"] = result.bucket_counts;
  write_text_file(paths.distill_meta, meta.dump(2) + "\n");

  log << "curated " << result.instances.size() << " of " << pool.size() << " pool instances ("
      << result.solvable_count << " solvable" << (result.underfilled ? ", underfilled" : "")
      << ")\n";
}

void stage_rl(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.sft_checkpoint, cfg, "sft");
  Weights weights = weights_from_checkpoint(ckpt);
  weights.set_trainable(false);

  const auto curated = task::read_dataset(paths.curated);
  if (curated.empty()) throw std::runtime_error("curated dataset is empty; rerun distill");

  GatingAdapters adapters(cfg.model.n_layers, cfg.model.n_kv_heads);
  GrpoConfig rl_cfg = cfg.rl;
  rl_cfg.seed = derive_seed(cfg.seed, kRlSeedStream);

  drop_stage_lines(paths.metrics, "rl");
  MetricsWriter writer(paths.metrics, /*append=*/true);
  auto last = std::chrono::steady_clock::now();
  run_rl(curated, weights, adapters, rl_cfg, [&](const RlStepMetrics& m) {
    const auto now = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.stage = "rl";
    rec.step = m.step;
    rec.mean_reward = m.mean_reward;
    rec.alpha_mean = static_cast<double>(m.alpha_mean);
    rec.alpha_sparsity_frac = static_cast<double>(m.alpha_sparsity);
    rec.beta_eff = m.beta_eff;
    rec.objective = m.objective;
    rec.wall_clock_ms = ms_between(last, now);
    last = now;
    writer.write(rec);
    if (m.step % 10 == 0 || m.step + 1 == rl_cfg.steps) {
      log << "rl step " << m.step << " reward " << fmt("%.3f", m.mean_reward) << " alpha_mean "
          << fmt("%.4f", m.alpha_mean) << " sparsity " << fmt("%.3f", m.alpha_sparsity) << "\n";
    }
  });

  CheckpointProvenance prov;
  prov.stage = "rl";
  prov.step_count = rl_cfg.steps;
  prov.config_hash = config_hash(cfg.model);
  save_checkpoint(paths.rl_checkpoint, make_checkpoint(weights, &adapters, prov));
}

void stage_rank(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.rl_checkpoint, cfg, "rl");
  const GatingAdapters adapters = require_adapters(ckpt, paths.rl_checkpoint);
  const HeadRanking ranking = rank_heads(adapters);
  write_text_file(paths.ranking, ranking_table(ranking));
  const RankedHead& top = ranking.order.front();
  log << "ranked " << ranking.n_heads() << " heads; top (layer " << top.layer << ", head "
      << top.kv_head << ") alpha " << fmt("%.4f", top.alpha) << "\n";
}

void stage_eval(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.rl_checkpoint, cfg, "rl");
  const Weights weights = weights_from_checkpoint(ckpt);
  const GatingAdapters adapters = require_adapters(ckpt, paths.rl_checkpoint);
  const HeadRanking ranking = rank_heads(adapters);
  const auto heldout = task::read_dataset(paths.eval_heldout);
  const EvalConfig& ev = cfg.eval;
  const int n_layers = cfg.model.n_layers;
  const int n_kv = cfg.model.n_kv_heads;

  std::vector<EvalRow> rows;

  EvalRow full_row;
  full_row.method = "full";
  full_row.result =
      evaluate_policy(heldout, weights, CachePolicy::all_full(n_layers, n_kv), ev.max_new);
  const double exact = eval_exact_match(heldout, weights, ev.max_new);
  if (full_row.result.accuracy != exact) {
    throw std::runtime_error("full-cache evaluation disagrees with the training-time evaluator");
  }
  rows.push_back(full_row);
  log << "full cache accuracy " << fmt("%.4f", full_row.result.accuracy) << "\n";

  for (std::size_t si = 0; si < ev.sparsity_grid.size(); ++si) {
    const float s = ev.sparsity_grid[si];
    EvalRow row;
    row.method = "deploy";
    row.sparsity = s;
    row.result = evaluate_policy(heldout, weights, policy_for_sparsity(ranking, s, ev.sink, ev.local),
                                 ev.max_new);
    log << "deploy s=" << fmt("%.2f", s) << " accuracy " << fmt("%.4f", row.result.accuracy)
        << " kv_bytes " << fmt("%.0f", row.result.mean_kv_bytes) << "\n";
    rows.push_back(row);

    for (int r = 0; r < ev.random_seeds; ++r) {
      EvalRow rand_row;
      rand_row.method = "random";
      rand_row.sparsity = s;
      rand_row.seed = r;
      const std::uint64_t seed =
          derive_seed(cfg.seed, kEvalRandomStream, si * 1000 + static_cast<std::uint64_t>(r));
      rand_row.result = evaluate_policy(
          heldout, weights, random_policy(s, n_layers, n_kv, ev.sink, ev.local, seed), ev.max_new);
      rows.push_back(rand_row);
    }
  }

  write_text_file(paths.deploy_csv, eval_rows_csv(rows));

  std::ostringstream per_head;
  per_head << "method,sparsity,layer,kv_head,mean_bytes\n";
  for (const EvalRow& row : rows) {
    if (row.method != "full" && row.method != "deploy") continue;
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_kv; ++h) {
        per_head << row.method << ',' << fmt("%.2f", row.sparsity) << ',' << l << ',' << h << ','
                 << fmt("%.2f", row.result.mean_per_head_bytes[static_cast<std::size_t>(l * n_kv + h)])
                 << '\n';
      }
    }
  }
  write_text_file(paths.per_head_csv, per_head.str());
}

void stage_baseline_eval(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.rl_checkpoint, cfg, "rl");
  const Weights weights = weights_from_checkpoint(ckpt);
  const GatingAdapters adapters = require_adapters(ckpt, paths.rl_checkpoint);
  const HeadRanking ranking = rank_heads(adapters);
  const auto heldout = task::read_dataset(paths.eval_heldout);
  const EvalConfig& ev = cfg.eval;
  const int n_layers = cfg.model.n_layers;
  const int n_kv = cfg.model.n_kv_heads;
  const int n_heads = n_layers * n_kv;
  const int window = ev.score_evict_window;

  // Budgets are matched at a reference length: the mean question length plus
  // the decode ceiling, the longest sequence evaluation typically reaches.
  double mean_q = 0.0;
  for (const task::TaskInstance& inst : heldout) mean_q += static_cast<double>(inst.question.size());
  mean_q /= static_cast<double>(heldout.size());
  const int t_ref = static_cast<int>(std::lround(mean_q)) + ev.max_new;

  std::ostringstream out;
  out << "method,sparsity,budget_frac,accuracy,mean_generated,mean_kv_bytes,"
         "err_none,err_repetitive,err_incorrect,err_overlength\n";
  const auto append_row = [&](const char* method, float sparsity, double budget_frac,
                              const EvalResult& res) {
    out << method << ',' << fmt("%.2f", sparsity) << ',' << fmt("%.4f", budget_frac) << ','
        << fmt("%.6f", res.accuracy) << ',' << fmt("%.4f", res.mean_generated) << ','
        << fmt("%.2f", res.mean_kv_bytes) << ',' << res.errors.none << ',' << res.errors.repetitive
        << ',' << res.errors.incorrect << ',' << res.errors.overlength << '\n';
  };

  for (float s : ev.sparsity_grid) {
    const CachePolicy deploy = policy_for_sparsity(ranking, s, ev.sink, ev.local);
    const MemoryReport deploy_mem = kv_memory_bytes(deploy, t_ref, cfg.model.head_dim, 4);
    const double kept_total =
        static_cast<double>(deploy_mem.total_bytes) / (2.0 * cfg.model.head_dim * 4.0);
    const double per_head_target = kept_total / static_cast<double>(n_heads);
    double budget_frac = (per_head_target - static_cast<double>(window)) / static_cast<double>(t_ref);
    budget_frac = std::min(1.0, std::max(1e-4, budget_frac));

    const CachePolicy se_policy(n_layers, n_kv,
                                HeadPolicy::score_evict(static_cast<float>(budget_frac), window));
    const EvalResult res = evaluate_policy(heldout, weights, se_policy, ev.max_new);
    append_row("score_evict", s, budget_frac, res);
    log << "score_evict matched to s=" << fmt("%.2f", s) << " (budget " << fmt("%.4f", budget_frac)
        << ") accuracy " << fmt("%.4f", res.accuracy) << "\n";
  }

  const EvalResult streaming_res = evaluate_policy(
      heldout, weights, CachePolicy::all_streaming(n_layers, n_kv, ev.sink, ev.local), ev.max_new);
  append_row("streaming", 1.0f, 0.0, streaming_res);
  log << "all-streaming accuracy " << fmt("%.4f", streaming_res.accuracy) << "\n";

  write_text_file(paths.baseline_csv, out.str());
}

void stage_importance(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const Checkpoint ckpt = load_stage_checkpoint(paths.rl_checkpoint, cfg, "rl");
  const Weights weights = weights_from_checkpoint(ckpt);
  const GatingAdapters adapters = require_adapters(ckpt, paths.rl_checkpoint);
  const HeadRanking ranking = rank_heads(adapters);
  const auto heldout = task::read_dataset(paths.eval_heldout);
  const EvalConfig& ev = cfg.eval;
  const int n_layers = cfg.model.n_layers;
  const int n_kv = cfg.model.n_kv_heads;
  const float f = ev.mask_fraction;

  const CachePolicy masked = mask_top_heads(ranking, f, ev.sink, ev.local);
  const int streamed = masked.count(CacheKind::Streaming);

  std::ostringstream out;
  out << "condition,fraction,seed,streamed_heads,accuracy\n";

  const double full_acc =
      evaluate_policy(heldout, weights, CachePolicy::all_full(n_layers, n_kv), ev.max_new).accuracy;
  out << "full," << fmt("%.2f", 0.0) << ",-1,0," << fmt("%.6f", full_acc) << '\n';

  const double top_acc = evaluate_policy(heldout, weights, masked, ev.max_new).accuracy;
  out << "mask_top," << fmt("%.2f", f) << ",-1," << streamed << ',' << fmt("%.6f", top_acc) << '\n';

  // Controls compress the same number of heads, chosen uniformly.
  double random_sum = 0.0;
  for (int r = 0; r < ev.random_seeds; ++r) {
    Rng rng(derive_seed(cfg.seed, kImportanceStream, static_cast<std::uint64_t>(r)));
    CachePolicy control = CachePolicy::all_full(n_layers, n_kv);
    for (int flat : rng.sample_without_replacement(n_layers * n_kv, streamed)) {
      control.at(flat / n_kv, flat % n_kv) = HeadPolicy::streaming(ev.sink, ev.local);
    }
    const double acc = evaluate_policy(heldout, weights, control, ev.max_new).accuracy;
    out << "mask_random," << fmt("%.2f", f) << ',' << r << ',' << streamed << ','
        << fmt("%.6f", acc) << '\n';
    random_sum += acc;
  }
  const double random_mean = random_sum / static_cast<double>(ev.random_seeds);

  write_text_file(paths.importance_csv, out.str());
  log << "masking top " << streamed << " heads: accuracy " << fmt("%.4f", top_acc)
      << " vs random-mask mean " << fmt("%.4f", random_mean) << " (margin "
      << fmt("%.4f", random_mean - top_acc) << ")\n";
}

void stage_report(const ExperimentConfig& cfg, const RunPaths& paths, std::ostream& log) {
  const CsvTable deploy = read_csv(paths.deploy_csv);
  const CsvTable baseline = read_csv(paths.baseline_csv);
  const CsvTable importance = read_csv(paths.importance_csv);

  const int d_method = deploy.col("method");
  const int d_sparsity = deploy.col("sparsity");
  const int d_acc = deploy.col("accuracy");
  const int d_bytes = deploy.col("mean_kv_bytes");
  const int b_method = baseline.col("method");
  const int b_sparsity = baseline.col("sparsity");
  const int b_acc = baseline.col("accuracy");
  const int b_bytes = baseline.col("mean_kv_bytes");
  const int i_cond = importance.col("condition");
  const int i_acc = importance.col("accuracy");

  double full_acc = 0.0;
  bool have_full = false;
  for (const auto& row : deploy.rows) {
    if (row[static_cast<std::size_t>(d_method)] == "full") {
      full_acc = std::stod(row[static_cast<std::size_t>(d_acc)]);
      have_full = true;
    }
  }
  if (!have_full) throw std::runtime_error("deploy table has no full-cache row");

  struct SparsitySummary {
    double deploy_acc = 0.0, deploy_bytes = 0.0;
    double random_acc_sum = 0.0, random_bytes_sum = 0.0;
    int random_n = 0;
    double se_acc = 0.0, se_bytes = 0.0;
    bool have_deploy = false, have_se = false;
  };
  std::vector<std::pair<std::string, SparsitySummary>> per_sparsity;
  const auto summary_for = [&](const std::string& key) -> SparsitySummary& {
    for (auto& [k, v] : per_sparsity) {
      if (k == key) return v;
    }
    per_sparsity.emplace_back(key, SparsitySummary{});
    return per_sparsity.back().second;
  };

  for (const auto& row : deploy.rows) {
    const std::string& method = row[static_cast<std::size_t>(d_method)];
    const std::string& key = row[static_cast<std::size_t>(d_sparsity)];
    if (method == "deploy") {
      SparsitySummary& s = summary_for(key);
      s.deploy_acc = std::stod(row[static_cast<std::size_t>(d_acc)]);
      s.deploy_bytes = std::stod(row[static_cast<std::size_t>(d_bytes)]);
      s.have_deploy = true;
    } else if (method == "random") {
      SparsitySummary& s = summary_for(key);
      s.random_acc_sum += std::stod(row[static_cast<std::size_t>(d_acc)]);
      s.random_bytes_sum += std::stod(row[static_cast<std::size_t>(d_bytes)]);
      s.random_n++;
    }
  }
  for (const auto& row : baseline.rows) {
    if (row[static_cast<std::size_t>(b_method)] != "score_evict") continue;
    SparsitySummary& s = summary_for(row[static_cast<std::size_t>(b_sparsity)]);
    s.se_acc = std::stod(row[static_cast<std::size_t>(b_acc)]);
    s.se_bytes = std::stod(row[static_cast<std::size_t>(b_bytes)]);
    s.have_se = true;
  }

  std::ostringstream csv;
  csv << "sparsity,full_accuracy,deploy_accuracy,random_mean_accuracy,score_evict_accuracy,"
         "deploy_kv_bytes,random_kv_bytes,score_evict_kv_bytes\n";
  std::ostringstream txt;
  txt << "deployment sweep (accuracy; " << "full cache " << fmt("%.4f", full_acc) << ")\n";
  txt << "sparsity  deploy  random  score_evict  deploy_bytes\n";
  for (const auto& [key, s] : per_sparsity) {
    if (!s.have_deploy) continue;
    const double rand_acc = s.random_n > 0 ? s.random_acc_sum / s.random_n : 0.0;
    const double rand_bytes = s.random_n > 0 ? s.random_bytes_sum / s.random_n : 0.0;
    csv << key << ',' << fmt("%.6f", full_acc) << ',' << fmt("%.6f", s.deploy_acc) << ','
        << fmt("%.6f", rand_acc) << ',' << (s.have_se ? fmt("%.6f", s.se_acc) : std::string("nan"))
        << ',' << fmt("%.2f", s.deploy_bytes) << ',' << fmt("%.2f", rand_bytes) << ','
        << (s.have_se ? fmt("%.2f", s.se_bytes) : std::string("nan")) << '\n';
    txt << key << "      " << fmt("%.4f", s.deploy_acc) << "  " << fmt("%.4f", rand_acc) << "  "
        << (s.have_se ? fmt("%.4f", s.se_acc) : std::string("n/a")) << "       "
        << fmt("%.0f", s.deploy_bytes) << '\n';
  }

  double top_acc = 0.0, rand_mask_sum = 0.0;
  int rand_mask_n = 0;
  for (const auto& row : importance.rows) {
    const std::string& cond = row[static_cast<std::size_t>(i_cond)];
    if (cond == "mask_top") top_acc = std::stod(row[static_cast<std::size_t>(i_acc)]);
    if (cond == "mask_random") {
      rand_mask_sum += std::stod(row[static_cast<std::size_t>(i_acc)]);
      rand_mask_n++;
    }
  }
  txt << "\nimportance probe: masking the top-ranked heads " << fmt("%.4f", top_acc)
      << " vs random masks " << fmt("%.4f", rand_mask_n > 0 ? rand_mask_sum / rand_mask_n : 0.0)
      << '\n';

  write_text_file(paths.summary_csv, csv.str());
  write_text_file(paths.summary_txt, txt.str());
  log << txt.str();
}

}  // namespace

const char* stage_name(Stage stage) { return kStageNames[static_cast<int>(stage)]; }

int stage_exit_code(Stage stage) { return 10 + static_cast<int>(stage); }

RunPaths run_paths(const std::string& out_dir) {
  const fs::path root(out_dir);
  RunPaths p;
  p.root = root.string();
  p.config_echo = (root / "config.json").string();
  p.sft_train = (root / "data" / "sft_train.jsonl").string();
  p.sft_heldout = (root / "data" / "sft_heldout.jsonl").string();
  p.pool = (root / "data" / "pool.jsonl").string();
  p.eval_heldout = (root / "data" / "eval_heldout.jsonl").string();
  p.curated = (root / "data" / "curated.jsonl").string();
  p.distill_meta = (root / "data" / "distill_meta.json").string();
  p.sft_checkpoint = (root / "checkpoints" / "sft.ckpt").string();
  p.rl_checkpoint = (root / "checkpoints" / "rl.ckpt").string();
  p.metrics = (root / "metrics.jsonl").string();
  p.ranking = (root / "ranking.txt").string();
  p.deploy_csv = (root / "eval" / "deploy.csv").string();
  p.per_head_csv = (root / "eval" / "per_head.csv").string();
  p.baseline_csv = (root / "eval" / "baseline.csv").string();
  p.importance_csv = (root / "eval" / "importance.csv").string();
  p.summary_csv = (root / "report" / "summary.csv").string();
  p.summary_txt = (root / "report" / "summary.txt").string();
  return p;
}

bool stage_done(Stage stage, const RunPaths& paths) {
  const auto all = [](std::initializer_list<const std::string*> files) {
    for (const std::string* f : files) {
      if (!fs::exists(*f)) return false;
    }
    return true;
  };
  switch (stage) {
    case Stage::GenData:
      return all({&paths.sft_train, &paths.sft_heldout, &paths.pool, &paths.eval_heldout});
    case Stage::Sft: return all({&paths.sft_checkpoint});
    case Stage::Distill: return all({&paths.curated, &paths.distill_meta});
    case Stage::Rl: return all({&paths.rl_checkpoint});
    case Stage::Rank: return all({&paths.ranking});
    case Stage::Eval: return all({&paths.deploy_csv, &paths.per_head_csv});
    case Stage::BaselineEval: return all({&paths.baseline_csv});
    case Stage::ImportanceStudy: return all({&paths.importance_csv});
    case Stage::Report: return all({&paths.summary_csv, &paths.summary_txt});
  }
  return false;
}

void prepare_run_dir(const ExperimentConfig& config) {
  const fs::path root(config.out_dir);
  fs::create_directories(root / "data");
  fs::create_directories(root / "checkpoints");
  fs::create_directories(root / "eval");
  fs::create_directories(root / "report");
  write_text_file((root / "config.json").string(), serialize_experiment_config(config));
}

void run_stage(Stage stage, const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  prepare_run_dir(config);
  const RunPaths paths = run_paths(config.out_dir);
  switch (stage) {
    case Stage::GenData: stage_gen_data(config, paths, log); return;
    case Stage::Sft: stage_sft(config, paths, log); return;
    case Stage::Distill: stage_distill(config, paths, log); return;
    case Stage::Rl: stage_rl(config, paths, log); return;
    case Stage::Rank: stage_rank(config, paths, log); return;
    case Stage::Eval: stage_eval(config, paths, log); return;
    case Stage::BaselineEval: stage_baseline_eval(config, paths, log); return;
    case Stage::ImportanceStudy: stage_importance(config, paths, log); return;
    case Stage::Report: stage_report(config, paths, log); return;
  }
  throw std::invalid_argument("run_stage: unknown stage");
}

int run_pipeline(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  prepare_run_dir(config);
  const RunPaths paths = run_paths(config.out_dir);
  for (int i = 0; i < kStageCount; ++i) {
    const Stage stage = static_cast<Stage>(i);
    if (stage_done(stage, paths)) {
      log << "[" << stage_name(stage) << "] artifacts present, skipping\n";
      continue;
    }
    log << "[" << stage_name(stage) << "]\n";
    try {
      run_stage(stage, config, log);
    } catch (const std::exception& e) {
      log << "[" << stage_name(stage) << "] failed: " << e.what() << "\n";
      return stage_exit_code(stage);
    }
  }
  return 0;
}

}  // namespace rlkv
