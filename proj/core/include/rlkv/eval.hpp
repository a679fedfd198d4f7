#pragma once

#include <span>
#include <vector>

#include "rlkv/kv_cache.hpp"
#include "rlkv/model.hpp"
#include "rlkv/tasks.hpp"

namespace rlkv {

struct ErrorHistogram {
  int none = 0;
  int repetitive = 0;
  int incorrect = 0;
  int overlength = 0;

  int total() const { return none + repetitive + incorrect + overlength; }
};

struct EvalResult {
  int count = 0;
  double accuracy = 0.0;
  double mean_generated = 0.0;              // emitted tokens per instance
  double mean_kv_bytes = 0.0;               // cache footprint at each realized length
  std::vector<double> mean_per_head_bytes;  // layer-major per-head footprint
  ErrorHistogram errors;
};

// Greedy decode of every instance under the cache policy, scoring exact-match
// reward, classifying failures, and accounting cache memory at each decode's
// realized sequence length.
EvalResult evaluate_policy(std::span<const task::TaskInstance> instances, const Weights& weights,
                           const CachePolicy& policy, int max_new);

}  // namespace rlkv
