#pragma once

#include <iosfwd>
#include <string>

#include "rlkv/config.hpp"

namespace rlkv {

// Pipeline stages in execution order. Each one reads the artifacts of the
// stages before it and writes its own under the run directory, so a partial
// run resumes from whatever already exists on disk.
enum class Stage {
  GenData,
  Sft,
  Distill,
  Rl,
  Rank,
  Eval,
  BaselineEval,
  ImportanceStudy,
  Report,
};

inline constexpr int kStageCount = 9;

const char* stage_name(Stage stage);

// Distinct nonzero process exit code for a failure inside the stage.
int stage_exit_code(Stage stage);

// Every artifact path of a run, all under out_dir.
struct RunPaths {
  std::string root;
  std::string config_echo;
  std::string sft_train;
  std::string sft_heldout;
  std::string pool;
  std::string eval_heldout;
  std::string curated;
  std::string distill_meta;
  std::string sft_checkpoint;
  std::string rl_checkpoint;
  std::string metrics;
  std::string ranking;
  std::string deploy_csv;
  std::string per_head_csv;
  std::string baseline_csv;
  std::string importance_csv;
  std::string summary_csv;
  std::string summary_txt;
};

RunPaths run_paths(const std::string& out_dir);

// True when every artifact the stage is responsible for already exists.
bool stage_done(Stage stage, const RunPaths& paths);

// Creates the run directory tree and archives the resolved config echo.
void prepare_run_dir(const ExperimentConfig& config);

// Executes one stage unconditionally; throws on failure.
void run_stage(Stage stage, const ExperimentConfig& config, std::ostream& log);

// All stages in order, skipping the ones already done. Returns 0 when the run
// completes, otherwise the failing stage's exit code after logging the error.
int run_pipeline(const ExperimentConfig& config, std::ostream& log);

}  // namespace rlkv
