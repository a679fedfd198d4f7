// Command-line harness: runs the full experiment pipeline or any single stage
// against a JSON config. Stages write their artifacts under the config's
// out_dir and a rerun picks up whatever already exists.
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rlkv/config.hpp"
#include "rlkv/pipeline.hpp"

namespace {

rlkv::ExperimentConfig load_config(const std::string& path, const std::string& out_dir_override) {
  rlkv::ExperimentConfig cfg =
      path.empty() ? rlkv::parse_experiment_config("{}") : rlkv::read_experiment_config(path);
  if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reasoning-head identification and compressed-cache evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_override;
  app.add_option("-c,--config", config_path, "JSON experiment config (defaults apply if omitted)")
      ->check(CLI::ExistingFile);
  app.add_option("-o,--out-dir", out_dir_override, "override the config's output directory");

  // one subcommand per stage, plus `run` for the whole pipeline
  CLI::App* run = app.add_subcommand("run", "execute every stage in order, resuming from artifacts");
  struct StageCmd {
    rlkv::Stage stage;
    CLI::App* cmd;
  };
  StageCmd stages[] = {
      {rlkv::Stage::GenData, app.add_subcommand("gen-data", "generate the task splits")},
      {rlkv::Stage::Sft, app.add_subcommand("sft", "supervised warm-up training")},
      {rlkv::Stage::Distill, app.add_subcommand("distill", "curate the RL pool by self-solving")},
      {rlkv::Stage::Rl, app.add_subcommand("rl", "train the per-head gates")},
      {rlkv::Stage::Rank, app.add_subcommand("rank", "export the head ranking")},
      {rlkv::Stage::Eval, app.add_subcommand("eval", "deployment sweep with controls")},
      {rlkv::Stage::ImportanceStudy,
       app.add_subcommand("importance-study", "mask top-ranked heads vs random masks")},
      {rlkv::Stage::BaselineEval,
       app.add_subcommand("baseline-eval", "score-based eviction at matched memory")},
      {rlkv::Stage::Report, app.add_subcommand("report", "aggregate the result tables")},
  };

  CLI11_PARSE(app, argc, argv);

  rlkv::ExperimentConfig cfg;
  try {
    cfg = load_config(config_path, out_dir_override);
  } catch (const std::exception& e) {
    std::cerr << "rlkv: " << e.what() << "\n";
    return 2;
  }

  if (run->parsed()) return rlkv::run_pipeline(cfg, std::cout);

  for (const StageCmd& sc : stages) {
    if (!sc.cmd->parsed()) continue;
    try {
      rlkv::run_stage(sc.stage, cfg, std::cout);
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "rlkv: " << rlkv::stage_name(sc.stage) << " failed: " << e.what() << "\n";
      return rlkv::stage_exit_code(sc.stage);
    }
  }
  std::cerr << "rlkv: no subcommand matched\n";
  return 2;
}
