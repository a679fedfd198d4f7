#include "rlkv/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rlkv {

const char* cache_kind_name(CacheKind kind) {
  switch (kind) {
    case CacheKind::Full: return "full";
    case CacheKind::Streaming: return "streaming";
    case CacheKind::ScoreEvict: return "score_evict";
  }
  return "unknown";
}

HeadPolicy HeadPolicy::streaming(int sink, int local) {
  if (sink < 1) throw std::invalid_argument("HeadPolicy::streaming: sink must be >= 1");
  if (local < 1) throw std::invalid_argument("HeadPolicy::streaming: local must be >= 1");
  HeadPolicy p;
  p.kind = CacheKind::Streaming;
  p.sink = sink;
  p.local = local;
  return p;
}

HeadPolicy HeadPolicy::score_evict(double budget_fraction, int window) {
  if (!(budget_fraction > 0.0) || budget_fraction > 1.0)
    throw std::invalid_argument("HeadPolicy::score_evict: budget_fraction must be in (0, 1]");
  if (window < 1) throw std::invalid_argument("HeadPolicy::score_evict: window must be >= 1");
  HeadPolicy p;
  p.kind = CacheKind::ScoreEvict;
  p.budget_fraction = budget_fraction;
  p.window = window;
  return p;
}

CachePolicy::CachePolicy(int n_layers, int n_kv_heads, HeadPolicy fill)
    : n_layers_(n_layers), n_kv_heads_(n_kv_heads) {
  if (n_layers < 1 || n_kv_heads < 1)
    throw std::invalid_argument("CachePolicy: layer and head counts must be positive");
  per_head_.assign(static_cast<std::size_t>(n_layers) * n_kv_heads, fill);
}

CachePolicy CachePolicy::all_full(int n_layers, int n_kv_heads) {
  return CachePolicy(n_layers, n_kv_heads, HeadPolicy::full());
}

CachePolicy CachePolicy::all_streaming(int n_layers, int n_kv_heads, int sink, int local) {
  return CachePolicy(n_layers, n_kv_heads, HeadPolicy::streaming(sink, local));
}

CachePolicy CachePolicy::all_score_evict(int n_layers, int n_kv_heads, double budget_fraction,
                                         int window) {
  return CachePolicy(n_layers, n_kv_heads, HeadPolicy::score_evict(budget_fraction, window));
}

HeadPolicy& CachePolicy::at(int layer, int head) {
  return const_cast<HeadPolicy&>(static_cast<const CachePolicy&>(*this).at(layer, head));
}

const HeadPolicy& CachePolicy::at(int layer, int head) const {
  if (layer < 0 || layer >= n_layers_ || head < 0 || head >= n_kv_heads_)
    throw std::out_of_range("CachePolicy::at: (" + std::to_string(layer) + ", " +
                            std::to_string(head) + ") outside " + std::to_string(n_layers_) +
                            "x" + std::to_string(n_kv_heads_));
  return per_head_[static_cast<std::size_t>(layer) * n_kv_heads_ + head];
}

bool CachePolicy::all_are(CacheKind kind) const {
  return count(kind) == static_cast<int>(per_head_.size());
}

int CachePolicy::count(CacheKind kind) const {
  int n = 0;
  for (const auto& p : per_head_)
    if (p.kind == kind) ++n;
  return n;
}

std::vector<int> streaming_visible_set(int t, int sink, int local) {
  if (t < 0) throw std::invalid_argument("streaming_visible_set: t must be >= 0");
  if (sink < 0) throw std::invalid_argument("streaming_visible_set: sink must be >= 0");
  if (local < 1) throw std::invalid_argument("streaming_visible_set: local must be >= 1");
  std::vector<int> out;
  int sink_end = std::min(sink, t + 1);
  out.reserve(static_cast<std::size_t>(sink_end + local));
  for (int i = 0; i < sink_end; ++i) out.push_back(i);
  for (int i = std::max(sink_end, t - local + 1); i <= t; ++i) out.push_back(i);
  return out;
}

int kept_upper_bound(const HeadPolicy& policy, int seq_len) {
  if (seq_len < 0) throw std::invalid_argument("kept_upper_bound: negative seq_len");
  switch (policy.kind) {
    case CacheKind::Full:
      return seq_len;
    case CacheKind::Streaming:
      return std::min(seq_len, policy.sink + policy.local);
    case CacheKind::ScoreEvict: {
      int budget = static_cast<int>(std::ceil(policy.budget_fraction * seq_len)) + policy.window;
      return std::min(seq_len, budget);
    }
  }
  return seq_len;
}

MemoryReport kv_memory_bytes(const CachePolicy& policy, int seq_len, int head_dim,
                             int bytes_per_value) {
  if (seq_len < 1) throw std::invalid_argument("kv_memory_bytes: seq_len must be >= 1");
  if (head_dim < 1 || bytes_per_value < 1)
    throw std::invalid_argument("kv_memory_bytes: head_dim and bytes_per_value must be positive");
  MemoryReport report;
  report.per_head_bytes.reserve(static_cast<std::size_t>(policy.n_heads()));
  for (int l = 0; l < policy.n_layers(); ++l) {
    for (int h = 0; h < policy.n_kv_heads(); ++h) {
      std::int64_t kept = kept_upper_bound(policy.at(l, h), seq_len);
      std::int64_t bytes = kept * 2 * head_dim * bytes_per_value;  // K and V
      report.per_head_bytes.push_back(bytes);
      report.total_bytes += bytes;
    }
  }
  return report;
}

std::vector<std::size_t> score_evict_update(HeadCacheState& state,
                                            std::span<const float> new_attention_row, int t,
                                            const HeadPolicy& policy) {
  if (policy.kind != CacheKind::ScoreEvict)
    throw std::invalid_argument("score_evict_update: policy head is not ScoreEvict");
  if (new_attention_row.size() != state.kept.size())
    throw std::invalid_argument("score_evict_update: attention row has " +
                                std::to_string(new_attention_row.size()) + " entries for " +
                                std::to_string(state.kept.size()) + " kept positions");
  if (!state.kept.empty() && state.kept.back() >= t)
    throw std::invalid_argument("score_evict_update: position " + std::to_string(t) +
                                " is not newer than the kept entries");
  if (state.scores.size() != state.kept.size())
    throw std::invalid_argument("score_evict_update: state scores misaligned with kept entries");
  for (float v : new_attention_row)
    if (!(v >= 0.0f))
      throw std::invalid_argument("score_evict_update: attention scores must be nonnegative");

  for (std::size_t i = 0; i < state.scores.size(); ++i) state.scores[i] += new_attention_row[i];
  state.kept.push_back(t);
  state.scores.push_back(0.0);

  std::size_t capacity = static_cast<std::size_t>(
      std::min<std::int64_t>(t + 1, static_cast<std::int64_t>(std::ceil(
                                        policy.budget_fraction * (t + 1))) +
                                        policy.window));

  // Victims are picked against the post-insert array; scores do not change while
  // evicting, so repeated argmin equals taking the lowest-scored eligible entries.
  // Eligible entries are strictly older than the protected recent window.
  std::size_t n_eligible = 0;
  while (n_eligible < state.kept.size() && state.kept[n_eligible] <= t - policy.window)
    ++n_eligible;

  std::vector<std::size_t> erased;
  while (state.kept.size() - erased.size() > capacity && erased.size() < n_eligible) {
    std::size_t victim = n_eligible;
    for (std::size_t i = 0; i < n_eligible; ++i) {
      if (std::find(erased.begin(), erased.end(), i) != erased.end()) continue;
      if (victim == n_eligible || state.scores[i] < state.scores[victim]) victim = i;
    }
    erased.push_back(victim);
  }
  std::sort(erased.rbegin(), erased.rend());
  for (std::size_t slot : erased) {
    state.kept.erase(state.kept.begin() + static_cast<std::ptrdiff_t>(slot));
    state.scores.erase(state.scores.begin() + static_cast<std::ptrdiff_t>(slot));
  }
  return erased;
}

}  // namespace rlkv
