#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clore/policy.hpp"
#include "clore/rng.hpp"

namespace clore {

// Synthetic token vocabulary. Token 0 is the pad token the policy expects.
namespace vocab {
constexpr int kPad = 0;
constexpr int kStop = 1;
constexpr int kDigit0 = 2;  // digits are ids 2..11
constexpr int kPlus = 12;
constexpr int kMinus = 13;
constexpr int kTimes = 14;
constexpr int kLParen = 15;
constexpr int kRParen = 16;
constexpr int kEquals = 17;
constexpr int kThink = 18;
constexpr int kAnsOpen = 19;
constexpr int kAnsClose = 20;
constexpr int kNoiseFirst = 21;  // noise class is ids 21..24
constexpr int kNoiseLast = 24;
constexpr int kSize = 25;

inline int digit(int d) { return kDigit0 + d; }
inline bool is_noise(int id) { return id >= kNoiseFirst && id <= kNoiseLast; }

const std::string& lexeme(int id);
}  // namespace vocab

// Detokenize by plain lexeme concatenation; tokenize by longest match,
// skipping ASCII whitespace. Returns nullopt on any unrecognized input.
std::string detokenize(std::span<const int> tokens);
std::optional<std::vector<int>> tokenize(const std::string& text);

// Whitespace tokenization for external (real-LLM) text traces.
std::vector<std::string> whitespace_tokenize(const std::string& text);

struct Problem {
  std::vector<int> prompt_tokens;  // expression tokens followed by '='
  std::string expression_text;
  std::string ground_truth;
  int difficulty = 1;
};

// Random integer expression over {+, -, x} with operands in [0, 9] and
// nesting depth equal to difficulty (in [1, 4]); ground truth by exact
// integer evaluation.
Problem generate_problem(Rng& rng, int difficulty);

struct AnswerFormat {
  enum class Kind { marker_pair, boxed };
  Kind kind = Kind::marker_pair;
  std::string open = vocab::lexeme(vocab::kAnsOpen);
  std::string close = vocab::lexeme(vocab::kAnsClose);

  static AnswerFormat markers();
  static AnswerFormat boxed();
};

// Contents of the last "\boxed{...}" span, brace-balanced (nesting allowed).
// nullopt when the last candidate never closes or no candidate exists.
std::optional<std::string> extract_boxed(const std::string& text);

struct ExtractedAnswer {
  std::string text;
  // span.first is the first content token; span.second is the index of the
  // token bearing the close delimiter (the close marker, or the token that
  // contains the final '}'). Marker-format content occupies [first, second).
  std::pair<int, int> span;
};

// Marker format: content strictly between the first open marker and the
// first close marker after it. Boxed format: extract_boxed on the
// detokenized text, with the span mapped back to token indices.
std::optional<ExtractedAnswer> extract_answer(std::span<const int> response,
                                              const AnswerFormat& format);

// Trims outer whitespace, removes \left and \right, rewrites
// \frac{a}{b} -> a/b (recursively), collapses internal space runs.
// Idempotent and never longer than its input.
std::string normalize_answer(const std::string& raw);

// 1 iff the normalized extracted answer equals the normalized ground truth;
// missing or malformed answers score 0.
int reward(const Problem& problem, const Trajectory& traj, const AnswerFormat& format);

// One line of the JSON-lines trace corpus shared by the augment/metrics
// modules and the analyze CLI.
struct TraceRecord {
  std::string problem;
  std::vector<int> response_tokens;  // used when response_text is empty
  std::string response_text;
  std::string gold_answer;
  std::string metadata;  // free-form JSON object text, may be empty
};

std::vector<TraceRecord> read_trace_corpus(const std::string& path);
void write_trace_corpus(const std::string& path, std::span<const TraceRecord> records);

}  // namespace clore
