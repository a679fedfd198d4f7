#include "rlkv/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace rlkv {

namespace {

using nlohmann::json;

void expect_object(const json& j, const char* ctx) {
  if (!j.is_object()) {
    throw std::runtime_error(std::string("config: ") + ctx + " must be an object");
  }
}

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed, const char* ctx) {
  for (const auto& [key, value] : obj.items()) {
    if (allowed.count(key) == 0) {
      throw std::runtime_error(std::string("config: unknown key \"") + key + "\" in " + ctx);
    }
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& into) {
  if (const auto it = obj.find(key); it != obj.end()) into = it->get<T>();
}

void parse_model(const json& j, ModelConfig& c) {
  expect_object(j, "model");
  reject_unknown_keys(j,
                      {"n_layers", "n_query_heads", "n_kv_heads", "head_dim", "ff_dim",
                       "vocab_size", "max_seq_len", "sink_train", "local_train"},
                      "model");
  read_field(j, "n_layers", c.n_layers);
  read_field(j, "n_query_heads", c.n_query_heads);
  read_field(j, "n_kv_heads", c.n_kv_heads);
  read_field(j, "head_dim", c.head_dim);
  read_field(j, "ff_dim", c.ff_dim);
  read_field(j, "vocab_size", c.vocab_size);
  read_field(j, "max_seq_len", c.max_seq_len);
  read_field(j, "sink_train", c.sink_train);
  read_field(j, "local_train", c.local_train);
}

void parse_tasks(const json& j, TaskGenConfig& c) {
  expect_object(j, "tasks");
  reject_unknown_keys(j,
                      {"value_modulus", "sft_train", "sft_heldout", "sft_min_steps",
                       "sft_max_steps", "pool", "pool_min_steps", "pool_max_steps",
                       "distill_target", "eval_heldout", "eval_min_steps", "eval_max_steps"},
                      "tasks");
  read_field(j, "value_modulus", c.value_modulus);
  read_field(j, "sft_train", c.sft_train);
  read_field(j, "sft_heldout", c.sft_heldout);
  read_field(j, "sft_min_steps", c.sft_min_steps);
  read_field(j, "sft_max_steps", c.sft_max_steps);
  read_field(j, "pool", c.pool);
  read_field(j, "pool_min_steps", c.pool_min_steps);
  read_field(j, "pool_max_steps", c.pool_max_steps);
  read_field(j, "distill_target", c.distill_target);
  read_field(j, "eval_heldout", c.eval_heldout);
  read_field(j, "eval_min_steps", c.eval_min_steps);
  read_field(j, "eval_max_steps", c.eval_max_steps);
}

void parse_sft(const json& j, SftConfig& c) {
  expect_object(j, "sft");
  reject_unknown_keys(j, {"batch_size", "learning_rate", "epochs", "beta1", "beta2",
                          "weight_decay"},
                      "sft");
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "epochs", c.epochs);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "weight_decay", c.weight_decay);
}

void parse_rl(const json& j, GrpoConfig& c) {
  expect_object(j, "rl");
  reject_unknown_keys(j,
                      {"group_size", "groups_per_step", "steps", "clip_epsilon", "base_penalty",
                       "reward_cutoff", "adapter_lr", "temperature", "max_new", "ratio_mode",
                       "adaptive_penalty"},
                      "rl");
  read_field(j, "group_size", c.group_size);
  read_field(j, "groups_per_step", c.groups_per_step);
  read_field(j, "steps", c.steps);
  read_field(j, "clip_epsilon", c.clip_epsilon);
  read_field(j, "base_penalty", c.base_penalty);
  read_field(j, "reward_cutoff", c.reward_cutoff);
  read_field(j, "adapter_lr", c.adapter_lr);
  read_field(j, "temperature", c.temperature);
  read_field(j, "max_new", c.max_new);
  read_field(j, "adaptive_penalty", c.adaptive_penalty);
  if (const auto it = j.find("ratio_mode"); it != j.end()) {
    const std::string mode = it->get<std::string>();
    if (mode == "per_token") {
      c.ratio_mode = RatioMode::PerToken;
    } else if (mode == "sequence") {
      c.ratio_mode = RatioMode::Sequence;
    } else {
      throw std::runtime_error("config: rl.ratio_mode must be \"per_token\" or \"sequence\"");
    }
  }
}

void parse_eval(const json& j, EvalConfig& c) {
  expect_object(j, "eval");
  reject_unknown_keys(j,
                      {"max_new", "sink", "local", "sparsity_grid", "random_seeds",
                       "mask_fraction", "score_evict_window"},
                      "eval");
  read_field(j, "max_new", c.max_new);
  read_field(j, "sink", c.sink);
  read_field(j, "local", c.local);
  read_field(j, "random_seeds", c.random_seeds);
  read_field(j, "mask_fraction", c.mask_fraction);
  read_field(j, "score_evict_window", c.score_evict_window);
  if (const auto it = j.find("sparsity_grid"); it != j.end()) {
    if (!it->is_array()) throw std::runtime_error("config: eval.sparsity_grid must be an array");
    c.sparsity_grid.clear();
    for (const json& v : *it) c.sparsity_grid.push_back(v.get<float>());
  }
}

}  // namespace

void TaskGenConfig::validate() const {
  if (value_modulus < 2) throw std::invalid_argument("tasks: value_modulus must be at least 2");
  const auto positive = [](int v, const char* what) {
    if (v < 1) throw std::invalid_argument(std::string("tasks: ") + what + " must be at least 1");
  };
  positive(sft_train, "sft_train");
  positive(sft_heldout, "sft_heldout");
  positive(pool, "pool");
  positive(distill_target, "distill_target");
  positive(eval_heldout, "eval_heldout");
  const auto range = [](int lo, int hi, const char* what) {
    if (lo < 1 || hi < lo) {
      throw std::invalid_argument(std::string("tasks: bad step range for ") + what);
    }
  };
  range(sft_min_steps, sft_max_steps, "sft");
  range(pool_min_steps, pool_max_steps, "pool");
  range(eval_min_steps, eval_max_steps, "eval");
}

void EvalConfig::validate() const {
  if (max_new < 1) throw std::invalid_argument("eval: max_new must be at least 1");
  if (sink < 1) throw std::invalid_argument("eval: sink must be at least 1");
  if (local < 1) throw std::invalid_argument("eval: local must be at least 1");
  if (sparsity_grid.empty()) throw std::invalid_argument("eval: sparsity_grid must be nonempty");
  for (float s : sparsity_grid) {
    if (!(s >= 0.0f && s <= 1.0f)) {
      throw std::invalid_argument("eval: sparsity grid values must lie in [0, 1]");
    }
  }
  if (random_seeds < 1) throw std::invalid_argument("eval: random_seeds must be at least 1");
  if (!(mask_fraction >= 0.0f && mask_fraction <= 1.0f)) {
    throw std::invalid_argument("eval: mask_fraction must lie in [0, 1]");
  }
  if (score_evict_window < 1) {
    throw std::invalid_argument("eval: score_evict_window must be at least 1");
  }
}

void ExperimentConfig::validate() const {
  if (out_dir.empty()) throw std::invalid_argument("config: out_dir must be nonempty");
  model.validate();
  tasks.validate();
  sft.validate();
  rl.validate();
  eval.validate();
  if (task::kTokenCount > model.vocab_size) {
    throw std::invalid_argument("config: vocab_size is too small for the task alphabet");
  }
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config: parse error: ") + e.what());
  }
  expect_object(root, "top level");
  reject_unknown_keys(root, {"seed", "out_dir", "model", "tasks", "sft", "rl", "eval"},
                      "top level");

  ExperimentConfig cfg;
  read_field(root, "seed", cfg.seed);
  read_field(root, "out_dir", cfg.out_dir);
  if (const auto it = root.find("model"); it != root.end()) parse_model(*it, cfg.model);
  if (const auto it = root.find("tasks"); it != root.end()) parse_tasks(*it, cfg.tasks);
  if (const auto it = root.find("sft"); it != root.end()) parse_sft(*it, cfg.sft);
  if (const auto it = root.find("rl"); it != root.end()) parse_rl(*it, cfg.rl);
  if (const auto it = root.find("eval"); it != root.end()) parse_eval(*it, cfg.eval);
  cfg.validate();
  return cfg;
}

ExperimentConfig read_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

std::string serialize_experiment_config(const ExperimentConfig& config) {
  json root{
      {"seed", config.seed},
      {"out_dir", config.out_dir},
      {"model",
       {{"n_layers", config.model.n_layers},
        {"n_query_heads", config.model.n_query_heads},
        {"n_kv_heads", config.model.n_kv_heads},
        {"head_dim", config.model.head_dim},
        {"ff_dim", config.model.ff_dim},
        {"vocab_size", config.model.vocab_size},
        {"max_seq_len", config.model.max_seq_len},
        {"sink_train", config.model.sink_train},
        {"local_train", config.model.local_train}}},
      {"tasks",
       {{"value_modulus", config.tasks.value_modulus},
        {"sft_train", config.tasks.sft_train},
        {"sft_heldout", config.tasks.sft_heldout},
        {"sft_min_steps", config.tasks.sft_min_steps},
        {"sft_max_steps", config.tasks.sft_max_steps},
        {"pool", config.tasks.pool},
        {"pool_min_steps", config.tasks.pool_min_steps},
        {"pool_max_steps", config.tasks.pool_max_steps},
        {"distill_target", config.tasks.distill_target},
        {"eval_heldout", config.tasks.eval_heldout},
        {"eval_min_steps", config.tasks.eval_min_steps},
        {"eval_max_steps", config.tasks.eval_max_steps}}},
      {"sft",
       {{"batch_size", config.sft.batch_size},
        {"learning_rate", config.sft.learning_rate},
        {"epochs", config.sft.epochs},
        {"beta1", config.sft.beta1},
        {"beta2", config.sft.beta2},
        {"weight_decay", config.sft.weight_decay}}},
      {"rl",
       {{"group_size", config.rl.group_size},
        {"groups_per_step", config.rl.groups_per_step},
        {"steps", config.rl.steps},
        {"clip_epsilon", config.rl.clip_epsilon},
        {"base_penalty", config.rl.base_penalty},
        {"reward_cutoff", config.rl.reward_cutoff},
        {"adapter_lr", config.rl.adapter_lr},
        {"temperature", config.rl.temperature},
        {"max_new", config.rl.max_new},
        {"ratio_mode", config.rl.ratio_mode == RatioMode::PerToken ? "per_token" : "sequence"},
        {"adaptive_penalty", config.rl.adaptive_penalty}}},
      {"eval",
       {{"max_new", config.eval.max_new},
        {"sink", config.eval.sink},
        {"local", config.eval.local},
        {"sparsity_grid", config.eval.sparsity_grid},
        {"random_seeds", config.eval.random_seeds},
        {"mask_fraction", config.eval.mask_fraction},
        {"score_evict_window", config.eval.score_evict_window}}}};
  return root.dump(2) + "\n";
}

}  // namespace rlkv
