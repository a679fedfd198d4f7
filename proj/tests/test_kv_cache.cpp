#include <algorithm>
#include <cstddef>
#include <vector>

#include "doctest.h"
#include "rlkv/kv_cache.hpp"
#include "rlkv/rng.hpp"

using namespace rlkv;

TEST_CASE("streaming visible set enumerates sinks plus the recent window") {
  CHECK(streaming_visible_set(9, 2, 3) == std::vector<int>{0, 1, 7, 8, 9});
  CHECK(streaming_visible_set(3, 2, 3) == std::vector<int>{0, 1, 2, 3});
  CHECK(streaming_visible_set(0, 1, 1) == std::vector<int>{0});
  CHECK(streaming_visible_set(0, 16, 64) == std::vector<int>{0});
  CHECK(streaming_visible_set(5, 1, 1) == std::vector<int>{0, 5});

  CHECK_THROWS_AS(streaming_visible_set(-1, 2, 3), std::invalid_argument);
  CHECK_THROWS_AS(streaming_visible_set(3, 2, 0), std::invalid_argument);
}

TEST_CASE("streaming visible set properties over random parameters") {
  Rng rng(0x51f3u);
  for (int trial = 0; trial < 500; ++trial) {
    int t = rng.next_int(0, 300);
    int sink = rng.next_int(1, 20);
    int local = rng.next_int(1, 40);
    auto vis = streaming_visible_set(t, sink, local);

    REQUIRE(!vis.empty());
    CHECK(vis.back() == t);                                      // self always visible
    CHECK(std::is_sorted(vis.begin(), vis.end()));
    CHECK(std::adjacent_find(vis.begin(), vis.end()) == vis.end());
    CHECK(static_cast<int>(vis.size()) <= sink + local);
    CHECK(static_cast<int>(vis.size()) <= t + 1);
    for (int p : vis) {
      CHECK(p >= 0);
      CHECK(p <= t);
      CHECK((p < sink || p > t - local));
    }
  }
}

TEST_CASE("head policy factories validate their parameters") {
  CHECK(HeadPolicy::full().kind == CacheKind::Full);
  CHECK(HeadPolicy::streaming(4, 8).sink == 4);
  CHECK(HeadPolicy::streaming(4, 8).local == 8);
  CHECK(HeadPolicy::score_evict(0.25, 2).window == 2);

  CHECK_THROWS_AS(HeadPolicy::streaming(0, 8), std::invalid_argument);
  CHECK_THROWS_AS(HeadPolicy::streaming(4, 0), std::invalid_argument);
  CHECK_THROWS_AS(HeadPolicy::score_evict(0.0, 2), std::invalid_argument);
  CHECK_THROWS_AS(HeadPolicy::score_evict(1.5, 2), std::invalid_argument);
  CHECK_THROWS_AS(HeadPolicy::score_evict(0.5, 0), std::invalid_argument);
}

TEST_CASE("cache policy holds one assignment per layer and kv head") {
  CachePolicy policy = CachePolicy::all_full(4, 2);
  CHECK(policy.n_heads() == 8);
  CHECK(policy.all_are(CacheKind::Full));
  CHECK(policy.count(CacheKind::Full) == 8);

  policy.at(1, 0) = HeadPolicy::streaming(2, 3);
  policy.at(3, 1) = HeadPolicy::score_evict(0.5, 1);
  CHECK(!policy.all_are(CacheKind::Full));
  CHECK(policy.count(CacheKind::Full) == 6);
  CHECK(policy.count(CacheKind::Streaming) == 1);
  CHECK(policy.count(CacheKind::ScoreEvict) == 1);
  CHECK(policy.at(1, 0).sink == 2);

  CHECK_THROWS_AS(policy.at(4, 0), std::out_of_range);
  CHECK_THROWS_AS(policy.at(0, 2), std::out_of_range);
  CHECK_THROWS_AS(policy.at(-1, 0), std::out_of_range);
  CHECK_THROWS_AS(CachePolicy(0, 2), std::invalid_argument);
}

TEST_CASE("kv memory accounting matches hand-computed byte counts") {
  // One full head: 1000 tokens x 2 (K and V) x 8 dims x 4 bytes.
  auto full = kv_memory_bytes(CachePolicy::all_full(1, 1), 1000, 8, 4);
  CHECK(full.total_bytes == 64000);
  REQUIRE(full.per_head_bytes.size() == 1);
  CHECK(full.per_head_bytes[0] == 64000);

  // Streaming{16,64} caps at 80 kept tokens: 80 x 2 x 8 x 4.
  auto stream = kv_memory_bytes(CachePolicy::all_streaming(1, 1, 16, 64), 1000, 8, 4);
  CHECK(stream.total_bytes == 5120);

  // Streaming{4,8} at 100 tokens, head_dim 16: 12 x 2 x 16 x 4.
  auto small = kv_memory_bytes(CachePolicy::all_streaming(1, 1, 4, 8), 100, 16, 4);
  CHECK(small.total_bytes == 1536);

  // Below capacity a streaming head stores exactly what a full head does.
  auto short_stream = kv_memory_bytes(CachePolicy::all_streaming(2, 3, 16, 64), 50, 8, 4);
  auto short_full = kv_memory_bytes(CachePolicy::all_full(2, 3), 50, 8, 4);
  CHECK(short_stream.total_bytes == short_full.total_bytes);

  // Mixed policy sums per-head contributions.
  CachePolicy mixed = CachePolicy::all_streaming(1, 2, 16, 64);
  mixed.at(0, 0) = HeadPolicy::full();
  auto m = kv_memory_bytes(mixed, 1000, 8, 4);
  CHECK(m.per_head_bytes == std::vector<std::int64_t>{64000, 5120});
  CHECK(m.total_bytes == 69120);

  CHECK_THROWS_AS(kv_memory_bytes(mixed, 0, 8, 4), std::invalid_argument);
}

TEST_CASE("kv memory is monotone nondecreasing in sequence length") {
  CachePolicy policy = CachePolicy::all_full(2, 2);
  policy.at(0, 1) = HeadPolicy::streaming(2, 3);
  policy.at(1, 0) = HeadPolicy::score_evict(0.25, 4);

  std::int64_t prev = 0;
  for (int len = 1; len <= 200; ++len) {
    auto r = kv_memory_bytes(policy, len, 16, 4);
    CHECK(r.total_bytes >= prev);
    prev = r.total_bytes;
  }

  // All-streaming total stops growing once every head is at capacity.
  auto a = kv_memory_bytes(CachePolicy::all_streaming(4, 4, 4, 8), 12, 16, 4);
  auto b = kv_memory_bytes(CachePolicy::all_streaming(4, 4, 4, 8), 500, 16, 4);
  auto c = kv_memory_bytes(CachePolicy::all_streaming(4, 4, 4, 8), 5000, 16, 4);
  CHECK(a.total_bytes == b.total_bytes);
  CHECK(b.total_bytes == c.total_bytes);
}

TEST_CASE("score eviction drops the lowest accumulated score outside the window") {
  // capacity at t=2 is ceil(3 * 1/3) + 1 = 2, the recent window protects {2}.
  HeadPolicy policy = HeadPolicy::score_evict(1.0 / 3.0, 1);
  HeadCacheState state;
  state.kept = {0, 1};
  state.scores = {0.05, 0.8};

  std::vector<float> row = {0.05f, 0.1f};  // accumulated scores become {0.1, 0.9}
  auto erased = score_evict_update(state, row, 2, policy);

  CHECK(erased == std::vector<std::size_t>{0});
  CHECK(state.kept == std::vector<int>{1, 2});
  REQUIRE(state.scores.size() == 2);
  CHECK(state.scores[0] == doctest::Approx(0.9));
  CHECK(state.scores[1] == doctest::Approx(0.0));
}

TEST_CASE("score eviction breaks ties toward the smallest index") {
  HeadPolicy policy = HeadPolicy::score_evict(1.0 / 3.0, 1);
  HeadCacheState state;
  state.kept = {0, 1};
  state.scores = {0.5, 0.5};

  std::vector<float> row = {0.0f, 0.0f};
  auto erased = score_evict_update(state, row, 2, policy);

  CHECK(erased == std::vector<std::size_t>{0});
  CHECK(state.kept == std::vector<int>{1, 2});
}

TEST_CASE("score eviction keeps everything while under budget") {
  HeadPolicy policy = HeadPolicy::score_evict(1.0, 4);
  HeadCacheState state;
  for (int t = 0; t < 50; ++t) {
    std::vector<float> row(state.kept.size(), 0.01f);
    auto erased = score_evict_update(state, row, t, policy);
    CHECK(erased.empty());
  }
  CHECK(state.kept.size() == 50);
}

TEST_CASE("score eviction rejects malformed updates") {
  HeadPolicy policy = HeadPolicy::score_evict(0.5, 2);
  HeadCacheState state;
  state.kept = {0, 1, 2};
  state.scores = {0.1, 0.2, 0.3};

  std::vector<float> short_row = {0.1f, 0.2f};
  CHECK_THROWS_AS(score_evict_update(state, short_row, 3, policy), std::invalid_argument);

  std::vector<float> negative = {0.1f, -0.2f, 0.3f};
  CHECK_THROWS_AS(score_evict_update(state, negative, 3, policy), std::invalid_argument);

  std::vector<float> row = {0.1f, 0.2f, 0.3f};
  CHECK_THROWS_AS(score_evict_update(state, row, 2, policy), std::invalid_argument);

  HeadPolicy not_evict = HeadPolicy::streaming(2, 3);
  CHECK_THROWS_AS(score_evict_update(state, row, 3, not_evict), std::invalid_argument);
}

TEST_CASE("score eviction invariants hold over a random decode") {
  Rng rng(0xe71c7u);
  for (int trial = 0; trial < 20; ++trial) {
    double bf = 0.1 + 0.4 * rng.next_double();
    int window = rng.next_int(1, 6);
    HeadPolicy policy = HeadPolicy::score_evict(bf, window);

    HeadCacheState state;
    for (int t = 0; t < 120; ++t) {
      std::vector<float> row(state.kept.size());
      for (auto& v : row) v = static_cast<float>(rng.next_double());
      auto erased = score_evict_update(state, row, t, policy);

      for (std::size_t slot : erased) CHECK(slot < state.kept.size() + erased.size());
      CHECK(std::is_sorted(erased.rbegin(), erased.rend()));

      CHECK(std::is_sorted(state.kept.begin(), state.kept.end()));
      CHECK(state.kept.back() == t);
      std::size_t capacity = static_cast<std::size_t>(
          std::ceil(bf * (t + 1)) + window);
      CHECK(state.kept.size() <= capacity);
      // the most recent `window` positions are never evicted
      for (int p = std::max(0, t - window + 1); p <= t; ++p)
        CHECK(std::find(state.kept.begin(), state.kept.end(), p) != state.kept.end());
    }
  }
}

TEST_CASE("kept upper bound tracks each policy kind") {
  CHECK(kept_upper_bound(HeadPolicy::full(), 123) == 123);
  CHECK(kept_upper_bound(HeadPolicy::streaming(4, 8), 123) == 12);
  CHECK(kept_upper_bound(HeadPolicy::streaming(4, 8), 7) == 7);
  CHECK(kept_upper_bound(HeadPolicy::score_evict(0.25, 4), 100) == 29);
  CHECK(kept_upper_bound(HeadPolicy::score_evict(1.0, 1), 100) == 100);
}
