#include "rlkv/tasks.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "rlkv/rng.hpp"

namespace rlkv::task {

namespace {

constexpr char kChars[kTokenCount] = {'0', '1', '2', '3', '4', '5', '6', '7', '8', '9',
                                      '+', '-', '*', ';', '=', '#', '?', '^', '$'};

int char_to_token(char c) {
  for (int i = 0; i < kTokenCount; ++i)
    if (kChars[i] == c) return i;
  throw std::invalid_argument(std::string("tokenize: unknown character '") + c + "'");
}

void append_number(std::vector<int>& out, long long value) {
  if (value < 0) throw std::invalid_argument("append_number: negative value");
  std::string digits = std::to_string(value);
  for (char c : digits) out.push_back(c - '0');
}

}  // namespace

std::string detokenize(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t >= kTokenCount)
      throw std::invalid_argument("detokenize: token id " + std::to_string(t) +
                                  " has no character");
    out.push_back(kChars[t]);
  }
  return out;
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(char_to_token(c));
  return out;
}

std::vector<int> TaskInstance::full_sequence() const {
  std::vector<int> out = question;
  out.insert(out.end(), gold_cot.begin(), gold_cot.end());
  return out;
}

const std::vector<int>& default_bucket_edges() {
  static const std::vector<int> edges = {8, 13, 23, 33};
  return edges;
}

int difficulty_bucket(int cot_len, std::span<const int> edges) {
  if (edges.empty()) throw std::invalid_argument("difficulty_bucket: no edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1])
      throw std::invalid_argument("difficulty_bucket: edges must be strictly ascending");
  for (std::size_t i = 0; i < edges.size(); ++i)
    if (edges[i] >= cot_len) return static_cast<int>(i);
  return static_cast<int>(edges.size());  // overflow
}

TaskInstance make_instance(int start, std::span<const OpStep> ops, int value_modulus,
                           std::span<const int> bucket_edges) {
  if (value_modulus < 2) throw std::invalid_argument("make_instance: value_modulus must be >= 2");
  if (ops.empty()) throw std::invalid_argument("make_instance: at least one step required");
  if (start < 0 || start >= value_modulus)
    throw std::invalid_argument("make_instance: start outside [0, modulus)");

  TaskInstance inst;
  inst.n_steps = static_cast<int>(ops.size());

  inst.question.push_back(kBos);
  append_number(inst.question, start);
  long long value = start;
  for (const OpStep& s : ops) {
    if (s.operand < 0 || s.operand >= value_modulus)
      throw std::invalid_argument("make_instance: operand outside [0, modulus)");
    inst.question.push_back(s.op_token);
    append_number(inst.question, s.operand);
    inst.question.push_back(kSep);

    switch (s.op_token) {
      case kPlus: value = (value + s.operand) % value_modulus; break;
      case kMinus: value = ((value - s.operand) % value_modulus + value_modulus) % value_modulus; break;
      case kTimes: value = (value * s.operand) % value_modulus; break;
      default:
        throw std::invalid_argument("make_instance: op token " + std::to_string(s.op_token) +
                                    " is not an operation");
    }

    inst.gold_cot.push_back(s.op_token);
    append_number(inst.gold_cot, s.operand);
    inst.gold_cot.push_back(kEquals);
    append_number(inst.gold_cot, value);
    inst.gold_cot.push_back(kSep);
  }
  inst.question.push_back(kQuery);

  inst.gold_answer = static_cast<int>(value);
  inst.gold_cot.push_back(kMarker);
  append_number(inst.gold_cot, value);
  inst.gold_cot.push_back(kEos);

  inst.bucket = difficulty_bucket(static_cast<int>(inst.gold_cot.size()), bucket_edges);
  return inst;
}

TaskInstance gen_instance(std::uint64_t seed, int n_steps, int value_modulus) {
  if (n_steps < 1) throw std::invalid_argument("gen_instance: n_steps must be >= 1");
  if (value_modulus < 2) throw std::invalid_argument("gen_instance: value_modulus must be >= 2");

  Rng rng(seed);
  int start = rng.next_int(0, value_modulus - 1);
  std::vector<OpStep> ops(static_cast<std::size_t>(n_steps));
  for (auto& s : ops) {
    const int kind = rng.next_int(0, 2);
    s.op_token = kind == 0 ? kPlus : kind == 1 ? kMinus : kTimes;
    s.operand = rng.next_int(0, value_modulus - 1);
  }
  return make_instance(start, ops, value_modulus, default_bucket_edges());
}

std::optional<long long> extract_answer(std::span<const int> text) {
  std::ptrdiff_t marker = -1;
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(text.size()); ++i)
    if (text[static_cast<std::size_t>(i)] == kMarker) marker = i;
  if (marker < 0) return std::nullopt;

  long long value = 0;
  int digits = 0;
  for (std::size_t i = static_cast<std::size_t>(marker) + 1; i < text.size(); ++i) {
    const int t = text[i];
    if (t < 0 || t > 9) break;
    value = value * 10 + t;
    ++digits;
    if (digits > 18) return std::nullopt;  // implausibly long, treat as malformed
  }
  if (digits == 0) return std::nullopt;
  return value;
}

float verify_reward(std::span<const int> text, const TaskInstance& instance) {
  auto answer = extract_answer(text);
  return answer.has_value() && *answer == instance.gold_answer ? 1.0f : 0.0f;
}

const char* error_mode_name(ErrorMode m) {
  switch (m) {
    case ErrorMode::None: return "none";
    case ErrorMode::Repetitive: return "repetitive";
    case ErrorMode::Incorrect: return "incorrect";
    case ErrorMode::Overlength: return "overlength";
  }
  return "unknown";
}

namespace {

// A 4-token block repeated >= 8 times back to back means 28 consecutive
// positions agree with the token four places earlier.
bool has_consecutive_repetition(std::span<const int> text) {
  constexpr int kGram = 4;
  constexpr int kNeeded = (8 - 1) * kGram;
  int run = 0;
  for (std::size_t i = kGram; i < text.size(); ++i) {
    if (text[i] == text[i - kGram]) {
      if (++run >= kNeeded) return true;
    } else {
      run = 0;
    }
  }
  return false;
}

}  // namespace

ErrorMode classify_error(std::span<const int> generated, const TaskInstance& instance,
                         int max_new) {
  if (verify_reward(generated, instance) == 1.0f) return ErrorMode::None;
  if (has_consecutive_repetition(generated)) return ErrorMode::Repetitive;
  bool has_marker = false;
  for (int t : generated)
    if (t == kMarker) has_marker = true;
  if (static_cast<int>(generated.size()) >= max_new && !has_marker) return ErrorMode::Overlength;
  return ErrorMode::Incorrect;
}

void write_dataset(const std::string& path, const std::vector<TaskInstance>& instances) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
  for (const TaskInstance& inst : instances) {
    nlohmann::json j;
    j["question"] = detokenize(inst.question);
    j["gold_cot"] = detokenize(inst.gold_cot);
    j["gold_answer"] = inst.gold_answer;
    j["n_steps"] = inst.n_steps;
    j["bucket"] = inst.bucket;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

std::vector<TaskInstance> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
  std::vector<TaskInstance> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object())
      throw std::runtime_error("read_dataset: line " + std::to_string(line_no) +
                               " is not a record");
    for (const char* field : {"question", "gold_cot", "gold_answer", "n_steps", "bucket"})
      if (!j.contains(field))
        throw std::runtime_error("read_dataset: line " + std::to_string(line_no) +
                                 " lacks field " + field);
    TaskInstance inst;
    inst.question = tokenize(j.at("question").get<std::string>());
    inst.gold_cot = tokenize(j.at("gold_cot").get<std::string>());
    inst.gold_answer = j.at("gold_answer").get<int>();
    inst.n_steps = j.at("n_steps").get<int>();
    inst.bucket = j.at("bucket").get<int>();
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace rlkv::task
