#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlkv::task {

// Token ids for the arithmetic-chain language. Digits map to their own value;
// everything else sits directly above them. Keep kEos + 1 <= vocab_size of
// whatever model consumes these.
constexpr int kPlus = 10;
constexpr int kMinus = 11;
constexpr int kTimes = 12;
constexpr int kSep = 13;     // ';'
constexpr int kEquals = 14;  // '='
constexpr int kMarker = 15;  // '#', precedes the final answer
constexpr int kQuery = 16;   // '?', ends the question
constexpr int kBos = 17;     // '^'
constexpr int kEos = 18;     // '$'
constexpr int kTokenCount = 19;

std::string detokenize(std::span<const int> tokens);
std::vector<int> tokenize(const std::string& text);  // throws on unknown characters

struct OpStep {
  int op_token = kPlus;  // kPlus | kMinus | kTimes
  int operand = 0;       // in [0, value_modulus)
};

// One question/answer pair. question runs "^<start><op><k>;...?", gold_cot
// continues "<op><k>=<value>;...#<answer>$" with all arithmetic modulo the
// instance's modulus.
struct TaskInstance {
  std::vector<int> question;
  std::vector<int> gold_cot;
  int gold_answer = 0;
  int n_steps = 0;
  int bucket = 0;

  std::vector<int> full_sequence() const;  // question followed by gold_cot

  bool operator==(const TaskInstance&) const = default;
};

// Bucket edges over gold_cot token lengths for the default modulus-10 chains
// (5 tokens per step plus marker, answer digit, and terminator): single-step,
// two-step, three-to-four-step, five-to-six-step.
const std::vector<int>& default_bucket_edges();

// Index of the first edge >= cot_len; past the last edge returns edges.size()
// (an overflow bucket samplers reject).
int difficulty_bucket(int cot_len, std::span<const int> edges);

// Deterministic instance from explicit parts; throws when operands or the
// start value fall outside [0, value_modulus).
TaskInstance make_instance(int start, std::span<const OpStep> ops, int value_modulus,
                           std::span<const int> bucket_edges);

// Seeded random chain of n_steps operations drawn from {+k, -k, *k}.
TaskInstance gen_instance(std::uint64_t seed, int n_steps, int value_modulus);

// Integer following the final answer marker: a run of 1..18 digit tokens.
// Missing marker or malformed digits yield nullopt.
std::optional<long long> extract_answer(std::span<const int> text);

// 1.0 when the extracted answer equals the instance's, else 0.0.
float verify_reward(std::span<const int> text, const TaskInstance& instance);

enum class ErrorMode { None, Repetitive, Incorrect, Overlength };

const char* error_mode_name(ErrorMode m);

// Classification order: correct -> None; any 4-token block repeated 8+ times
// consecutively -> Repetitive; hit max_new with no marker -> Overlength;
// otherwise Incorrect. Never returns None when the reward is 0.
ErrorMode classify_error(std::span<const int> generated, const TaskInstance& instance,
                         int max_new);

// Line-delimited dataset I/O. Each line carries question, gold_cot,
// gold_answer, n_steps, and bucket; text fields round-trip through
// detokenize/tokenize.
void write_dataset(const std::string& path, const std::vector<TaskInstance>& instances);
std::vector<TaskInstance> read_dataset(const std::string& path);

}  // namespace rlkv::task
