#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace rlkv {

// Per-head cache retention policies. Full keeps every entry, Streaming keeps
// sink tokens plus a recent window, ScoreEvict keeps a dynamic budget chosen
// by accumulated attention mass plus a protected recent window.
enum class CacheKind { Full, Streaming, ScoreEvict };

const char* cache_kind_name(CacheKind kind);

struct HeadPolicy {
  CacheKind kind = CacheKind::Full;
  int sink = 0;                  // Streaming
  int local = 0;                 // Streaming
  double budget_fraction = 0.0;  // ScoreEvict
  int window = 0;                // ScoreEvict

  static HeadPolicy full() { return {}; }
  static HeadPolicy streaming(int sink, int local);
  static HeadPolicy score_evict(double budget_fraction, int window);

  bool operator==(const HeadPolicy&) const = default;
};

class CachePolicy {
 public:
  CachePolicy(int n_layers, int n_kv_heads, HeadPolicy fill = HeadPolicy::full());

  static CachePolicy all_full(int n_layers, int n_kv_heads);
  static CachePolicy all_streaming(int n_layers, int n_kv_heads, int sink, int local);
  static CachePolicy all_score_evict(int n_layers, int n_kv_heads, double budget_fraction,
                                     int window);

  int n_layers() const { return n_layers_; }
  int n_kv_heads() const { return n_kv_heads_; }
  int n_heads() const { return n_layers_ * n_kv_heads_; }

  HeadPolicy& at(int layer, int head);
  const HeadPolicy& at(int layer, int head) const;

  bool all_are(CacheKind kind) const;
  int count(CacheKind kind) const;

 private:
  int n_layers_;
  int n_kv_heads_;
  std::vector<HeadPolicy> per_head_;  // layer-major
};

// Sorted positions a streaming head may attend to at step t: absolute sinks
// [0, min(sink, t+1)) plus the recent window (t-local, t]. Always contains t.
std::vector<int> streaming_visible_set(int t, int sink, int local);

// Upper bound on entries a head retains after serving position seq_len-1.
int kept_upper_bound(const HeadPolicy& policy, int seq_len);

struct MemoryReport {
  std::int64_t total_bytes = 0;
  std::vector<std::int64_t> per_head_bytes;  // layer-major, K and V together
};

// Bytes of K/V storage per head at a given realized sequence length.
MemoryReport kv_memory_bytes(const CachePolicy& policy, int seq_len, int head_dim,
                             int bytes_per_value);

// Bookkeeping for one head's physically pruned cache. `kept` holds strictly
// increasing absolute positions; `scores` aligns with it for ScoreEvict heads.
struct HeadCacheState {
  std::vector<int> kept;
  std::vector<double> scores;
};

// One ScoreEvict step: accumulates the attention row (aligned with the kept
// entries before t is inserted), inserts t, and while the kept count exceeds
// ceil(budget_fraction*(t+1)) + window evicts the lowest-score entry outside
// the most recent `window` positions (ties break toward the smallest index).
// Returns erased slots in the post-insert array, sorted descending so callers
// can erase mirrored row storage in order.
std::vector<std::size_t> score_evict_update(HeadCacheState& state,
                                            std::span<const float> new_attention_row, int t,
                                            const HeadPolicy& policy);

}  // namespace rlkv
