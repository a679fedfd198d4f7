#pragma once

#include <cstdint>
#include <fstream>
#include <string>

namespace rlkv {

// One line of the training metrics stream. Every field is always present so
// downstream tooling can parse the stream without per-stage schemas.
struct MetricsRecord {
  std::string stage;
  int step = 0;
  double mean_reward = 0.0;
  double alpha_mean = 0.0;
  double alpha_sparsity_frac = 0.0;  // share of gate entries below 0.05
  double beta_eff = 0.0;
  double objective = 0.0;
  std::int64_t wall_clock_ms = 0;

  void validate() const;  // throws std::invalid_argument on schema violations
};

// Serialized single-line JSON form (no trailing newline); field order is
// fixed, so equal records produce byte-equal lines.
std::string metrics_line(const MetricsRecord& record);

MetricsRecord parse_metrics_line(const std::string& line);

// Append-only JSONL sink; every write validates first and flushes after.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool append = false);

  void write(const MetricsRecord& record);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace rlkv
