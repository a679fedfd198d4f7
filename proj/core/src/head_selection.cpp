#include "rlkv/head_selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "rlkv/rng.hpp"

namespace rlkv {

namespace {
constexpr std::uint32_t kRandomPolicyStream = 0x4e4du;

int rounded_count(float fraction, int n_heads) {
  return static_cast<int>(std::floor(static_cast<double>(fraction) * n_heads + 0.5));
}

void check_fraction(float f, const char* what) {
  if (!(f >= 0.0f && f <= 1.0f)) {
    throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
  }
}
}  // namespace

void HeadRanking::validate() const {
  if (n_layers < 1 || n_kv_heads < 1) {
    throw std::invalid_argument("HeadRanking: empty grid");
  }
  if (static_cast<int>(order.size()) != n_heads()) {
    throw std::invalid_argument("HeadRanking: entry count does not cover the grid");
  }
  std::vector<bool> seen(static_cast<std::size_t>(n_heads()), false);
  for (const RankedHead& h : order) {
    if (h.layer < 0 || h.layer >= n_layers || h.kv_head < 0 || h.kv_head >= n_kv_heads) {
      throw std::invalid_argument("HeadRanking: head outside the grid");
    }
    const std::size_t flat = static_cast<std::size_t>(h.layer * n_kv_heads + h.kv_head);
    if (seen[flat]) throw std::invalid_argument("HeadRanking: duplicate head");
    seen[flat] = true;
  }
  for (std::size_t i = 1; i < order.size(); ++i) {
    const RankedHead& a = order[i - 1];
    const RankedHead& b = order[i];
    const bool ordered = a.alpha > b.alpha ||
                         (a.alpha == b.alpha &&
                          (a.layer < b.layer || (a.layer == b.layer && a.kv_head < b.kv_head)));
    if (!ordered) throw std::invalid_argument("HeadRanking: order violates the tie-break rule");
  }
}

HeadRanking rank_heads(const GatingAdapters& adapters) {
  HeadRanking ranking;
  ranking.n_layers = adapters.n_layers();
  ranking.n_kv_heads = adapters.n_kv_heads();
  ranking.order.reserve(static_cast<std::size_t>(ranking.n_heads()));
  for (int l = 0; l < ranking.n_layers; ++l) {
    for (int h = 0; h < ranking.n_kv_heads; ++h) {
      ranking.order.push_back({l, h, adapters.value(l, h)});
    }
  }
  std::sort(ranking.order.begin(), ranking.order.end(), [](const RankedHead& a, const RankedHead& b) {
    if (a.alpha != b.alpha) return a.alpha > b.alpha;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.kv_head < b.kv_head;
  });
  return ranking;
}

CachePolicy policy_for_sparsity(const HeadRanking& ranking, float sparsity, int sink, int local) {
  ranking.validate();
  check_fraction(sparsity, "policy_for_sparsity: sparsity");
  const int k = rounded_count(1.0f - sparsity, ranking.n_heads());
  CachePolicy policy(ranking.n_layers, ranking.n_kv_heads, HeadPolicy::streaming(sink, local));
  for (int i = 0; i < k; ++i) {
    const RankedHead& h = ranking.order[static_cast<std::size_t>(i)];
    policy.at(h.layer, h.kv_head) = HeadPolicy::full();
  }
  return policy;
}

CachePolicy random_policy(float sparsity, int n_layers, int n_kv_heads, int sink, int local,
                          std::uint64_t seed) {
  if (n_layers < 1 || n_kv_heads < 1) {
    throw std::invalid_argument("random_policy: empty grid");
  }
  check_fraction(sparsity, "random_policy: sparsity");
  const int n = n_layers * n_kv_heads;
  const int k = rounded_count(1.0f - sparsity, n);
  CachePolicy policy(n_layers, n_kv_heads, HeadPolicy::streaming(sink, local));
  Rng rng(derive_seed(seed, kRandomPolicyStream));
  for (int flat : rng.sample_without_replacement(n, k)) {
    policy.at(flat / n_kv_heads, flat % n_kv_heads) = HeadPolicy::full();
  }
  return policy;
}

CachePolicy mask_top_heads(const HeadRanking& ranking, float fraction, int sink, int local) {
  ranking.validate();
  check_fraction(fraction, "mask_top_heads: fraction");
  const int m = rounded_count(fraction, ranking.n_heads());
  CachePolicy policy(ranking.n_layers, ranking.n_kv_heads, HeadPolicy::full());
  for (int i = 0; i < m; ++i) {
    const RankedHead& h = ranking.order[static_cast<std::size_t>(i)];
    policy.at(h.layer, h.kv_head) = HeadPolicy::streaming(sink, local);
  }
  return policy;
}

std::string ranking_table(const HeadRanking& ranking) {
  ranking.validate();
  std::string out = "layer kv_head alpha\n";
  char line[64];
  for (const RankedHead& h : ranking.order) {
    std::snprintf(line, sizeof(line), "%d %d %.6f\n", h.layer, h.kv_head,
                  static_cast<double>(h.alpha));
    out += line;
  }
  return out;
}

}  // namespace rlkv
