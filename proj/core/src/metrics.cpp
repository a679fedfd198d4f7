#include "rlkv/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace rlkv {

namespace {
using nlohmann::json;

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) {
    throw std::invalid_argument(std::string("metrics: ") + what + " must be finite");
  }
}

void check_unit(double v, const char* what) {
  check_finite(v, what);
  if (v < 0.0 || v > 1.0) {
    throw std::invalid_argument(std::string("metrics: ") + what + " must lie in [0, 1]");
  }
}
}  // namespace

void MetricsRecord::validate() const {
  if (stage.empty()) throw std::invalid_argument("metrics: stage must be nonempty");
  if (step < 0) throw std::invalid_argument("metrics: step must be non-negative");
  check_unit(mean_reward, "mean_reward");
  check_unit(alpha_mean, "alpha_mean");
  check_unit(alpha_sparsity_frac, "alpha_sparsity_frac");
  check_finite(beta_eff, "beta_eff");
  if (beta_eff < 0.0) throw std::invalid_argument("metrics: beta_eff must be non-negative");
  check_finite(objective, "objective");
  if (wall_clock_ms < 0) throw std::invalid_argument("metrics: wall_clock_ms must be non-negative");
}

std::string metrics_line(const MetricsRecord& record) {
  record.validate();
  const json j{{"stage", record.stage},
               {"step", record.step},
               {"mean_reward", record.mean_reward},
               {"alpha_mean", record.alpha_mean},
               {"alpha_sparsity_frac", record.alpha_sparsity_frac},
               {"beta_eff", record.beta_eff},
               {"objective", record.objective},
               {"wall_clock_ms", record.wall_clock_ms}};
  return j.dump();
}

MetricsRecord parse_metrics_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("metrics: parse error: ") + e.what());
  }
  MetricsRecord r;
  try {
    r.stage = j.at("stage").get<std::string>();
    r.step = j.at("step").get<int>();
    r.mean_reward = j.at("mean_reward").get<double>();
    r.alpha_mean = j.at("alpha_mean").get<double>();
    r.alpha_sparsity_frac = j.at("alpha_sparsity_frac").get<double>();
    r.beta_eff = j.at("beta_eff").get<double>();
    r.objective = j.at("objective").get<double>();
    r.wall_clock_ms = j.at("wall_clock_ms").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("metrics: missing field: ") + e.what());
  }
  r.validate();
  return r;
}

MetricsWriter::MetricsWriter(const std::string& path, bool append)
    : path_(path), out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw std::runtime_error("metrics: cannot open " + path);
}

void MetricsWriter::write(const MetricsRecord& record) {
  out_ << metrics_line(record) << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("metrics: write failed on " + path_);
}

}  // namespace rlkv
