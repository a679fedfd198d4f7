#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlkv/kv_cache.hpp"
#include "rlkv/model.hpp"

namespace rlkv {

struct RankedHead {
  int layer = 0;
  int kv_head = 0;
  float alpha = 0.0f;

  bool operator==(const RankedHead&) const = default;
};

// Total order over the gate grid: alpha descending, ties broken by layer then
// head so equal gates still rank reproducibly.
struct HeadRanking {
  int n_layers = 0;
  int n_kv_heads = 0;
  std::vector<RankedHead> order;

  int n_heads() const { return n_layers * n_kv_heads; }
  void validate() const;  // complete, in-range, correctly ordered
};

HeadRanking rank_heads(const GatingAdapters& adapters);

// Deployment policy: the top round((1 - sparsity) * n_heads) heads keep the
// full cache (half-up rounding), everything else streams with {sink, local}.
CachePolicy policy_for_sparsity(const HeadRanking& ranking, float sparsity, int sink, int local);

// Control: the same number of full heads as policy_for_sparsity, drawn
// uniformly without replacement under the seed.
CachePolicy random_policy(float sparsity, int n_layers, int n_kv_heads, int sink, int local,
                          std::uint64_t seed);

// Importance probe: compress the TOP round(fraction * n_heads) heads and keep
// the rest full - deliberately the inverse of deployment.
CachePolicy mask_top_heads(const HeadRanking& ranking, float fraction, int sink, int local);

// Plain text table, one "layer kv_head alpha" row per head in rank order.
std::string ranking_table(const HeadRanking& ranking);

}  // namespace rlkv
