#include "clore/synth_env.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <memory>
#include <stdexcept>

#include <json.hpp>

namespace clore {

using json = nlohmann::json;

namespace vocab {

const std::string& lexeme(int id) {
  static const std::array<std::string, kSize> table = {
      "<pad>", "<stop>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      "+", "-", "*", "(", ")", "=", "<think>", "<ans>", "</ans>",
      "~a", "~b", "~c", "~d"};
  if (id < 0 || id >= kSize) throw std::out_of_range("vocab: bad token id");
  return table[id];
}

}  // namespace vocab

std::string detokenize(std::span<const int> tokens) {
  std::string out;
  for (int id : tokens) out += vocab::lexeme(id);
  return out;
}

std::optional<std::vector<int>> tokenize(const std::string& text) {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    int best = -1;
    size_t best_len = 0;
    for (int id = 0; id < vocab::kSize; ++id) {
      const std::string& lex = vocab::lexeme(id);
      if (lex.size() > best_len && text.compare(i, lex.size(), lex) == 0) {
        best = id;
        best_len = lex.size();
      }
    }
    if (best < 0) return std::nullopt;
    out.push_back(best);
    i += best_len;
  }
  return out;
}

std::vector<std::string> whitespace_tokenize(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

namespace {

struct ExprNode {
  char op = 0;  // 0 for a leaf
  int leaf = 0;
  std::unique_ptr<ExprNode> left, right;
};

// Draw order is fixed: operator, deep side, left subtree, right subtree.
std::unique_ptr<ExprNode> gen_expr(Rng& rng, int depth) {
  auto node = std::make_unique<ExprNode>();
  if (depth == 0) {
    node->leaf = static_cast<int>(rng.next_below(10));
    return node;
  }
  node->op = "+-*"[rng.next_below(3)];
  const bool deep_left = rng.next_below(2) == 0;
  if (deep_left) {
    node->left = gen_expr(rng, depth - 1);
    node->right = gen_expr(rng, 0);
  } else {
    node->left = gen_expr(rng, 0);
    node->right = gen_expr(rng, depth - 1);
  }
  return node;
}

long long eval_expr(const ExprNode& n) {
  if (n.op == 0) return n.leaf;
  const long long a = eval_expr(*n.left);
  const long long b = eval_expr(*n.right);
  switch (n.op) {
    case '+': return a + b;
    case '-': return a - b;
    default: return a * b;
  }
}

void render_expr(const ExprNode& n, bool root, std::string& out) {
  if (n.op == 0) {
    out += static_cast<char>('0' + n.leaf);
    return;
  }
  if (!root) out += '(';
  render_expr(*n.left, false, out);
  out += n.op;
  render_expr(*n.right, false, out);
  if (!root) out += ')';
}

}  // namespace

Problem generate_problem(Rng& rng, int difficulty) {
  if (difficulty < 1 || difficulty > 4)
    throw std::invalid_argument("generate_problem: difficulty must be in [1, 4]");
  auto tree = gen_expr(rng, difficulty);
  Problem p;
  p.difficulty = difficulty;
  render_expr(*tree, true, p.expression_text);
  p.ground_truth = std::to_string(eval_expr(*tree));
  auto toks = tokenize(p.expression_text);
  p.prompt_tokens = std::move(*toks);
  p.prompt_tokens.push_back(vocab::kEquals);
  return p;
}

AnswerFormat AnswerFormat::markers() { return AnswerFormat{}; }

AnswerFormat AnswerFormat::boxed() {
  AnswerFormat f;
  f.kind = Kind::boxed;
  f.open = "\\boxed{";
  f.close = "}";
  return f;
}

std::optional<std::string> extract_boxed(const std::string& text) {
  static const std::string marker = "\\boxed{";
  const size_t pos = text.rfind(marker);
  if (pos == std::string::npos) return std::nullopt;
  const size_t open = pos + marker.size() - 1;  // the '{'
  int depth = 0;
  for (size_t i = open; i < text.size(); ++i) {
    if (text[i] == '{') ++depth;
    else if (text[i] == '}') {
      --depth;
      if (depth == 0) return text.substr(open + 1, i - open - 1);
    }
  }
  return std::nullopt;  // last candidate never closes
}

namespace {

std::optional<ExtractedAnswer> extract_marker_answer(std::span<const int> response,
                                                     const AnswerFormat& format) {
  auto open_toks = tokenize(format.open);
  auto close_toks = tokenize(format.close);
  if (!open_toks || !close_toks || open_toks->size() != 1 || close_toks->size() != 1)
    throw std::invalid_argument("answer format: markers must be single synthetic tokens");
  const int open_id = (*open_toks)[0];
  const int close_id = (*close_toks)[0];
  if (open_id == close_id) throw std::invalid_argument("answer format: delimiters must differ");

  const int n = static_cast<int>(response.size());
  int open_at = -1;
  for (int i = 0; i < n; ++i) {
    if (response[i] == open_id) {
      open_at = i;
      break;
    }
  }
  if (open_at < 0) return std::nullopt;
  for (int i = open_at + 1; i < n; ++i) {
    if (response[i] == close_id) {
      ExtractedAnswer ans;
      ans.span = {open_at + 1, i};
      ans.text = detokenize(response.subspan(open_at + 1, i - open_at - 1));
      return ans;
    }
  }
  return std::nullopt;  // open marker without close
}

std::optional<ExtractedAnswer> extract_boxed_answer(std::span<const int> response) {
  const std::string text = detokenize(response);
  const size_t pos = text.rfind("\\boxed{");
  auto content = extract_boxed(text);
  if (!content) return std::nullopt;
  const size_t content_begin = pos + 7;
  const size_t content_end = content_begin + content->size();  // the '}' index

  // Map character positions back onto token indices.
  ExtractedAnswer ans;
  ans.text = *content;
  int start = -1, end = -1;
  size_t offset = 0;
  for (int i = 0; i < static_cast<int>(response.size()); ++i) {
    const size_t len = vocab::lexeme(response[i]).size();
    if (start < 0 && offset + len > content_begin) start = i;
    if (offset <= content_end && content_end < offset + len) end = i;
    offset += len;
  }
  if (start < 0 || end < 0) return std::nullopt;
  ans.span = {start, end};
  return ans;
}

}  // namespace

std::optional<ExtractedAnswer> extract_answer(std::span<const int> response,
                                              const AnswerFormat& format) {
  if (format.kind == AnswerFormat::Kind::marker_pair)
    return extract_marker_answer(response, format);
  return extract_boxed_answer(response);
}

namespace {

void erase_all(std::string& s, const std::string& needle) {
  for (;;) {
    const size_t pos = s.find(needle);
    if (pos == std::string::npos) return;
    s.erase(pos, needle.size());
  }
}

// Finds the balanced group starting at s[open] == '{'; returns one past the
// matching '}' or npos.
size_t match_brace(const std::string& s, size_t open) {
  int depth = 0;
  for (size_t i = open; i < s.size(); ++i) {
    if (s[i] == '{') ++depth;
    else if (s[i] == '}') {
      --depth;
      if (depth == 0) return i + 1;
    }
  }
  return std::string::npos;
}

std::string rewrite_frac(const std::string& s) {
  static const std::string frac = "\\frac{";
  std::string out;
  size_t i = 0;
  while (i < s.size()) {
    const size_t pos = s.find(frac, i);
    if (pos == std::string::npos) {
      out += s.substr(i);
      break;
    }
    out += s.substr(i, pos - i);
    const size_t num_open = pos + frac.size() - 1;
    const size_t num_end = match_brace(s, num_open);
    if (num_end == std::string::npos || num_end >= s.size() || s[num_end] != '{') {
      out += frac;  // malformed: keep the marker, continue after it
      i = num_open + 1;
      continue;
    }
    const size_t den_end = match_brace(s, num_end);
    if (den_end == std::string::npos) {
      out += frac;
      i = num_open + 1;
      continue;
    }
    out += rewrite_frac(s.substr(num_open + 1, num_end - num_open - 2));
    out += '/';
    out += rewrite_frac(s.substr(num_end + 1, den_end - num_end - 2));
    i = den_end;
  }
  return out;
}

std::string normalize_once(const std::string& raw) {
  std::string s = raw;
  erase_all(s, "\\left");
  erase_all(s, "\\right");
  s = rewrite_frac(s);

  std::string out;
  out.reserve(s.size());
  bool in_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out += ' ';
    in_space = false;
    out += c;
  }
  return out;
}

}  // namespace

std::string normalize_answer(const std::string& raw) {
  std::string cur = normalize_once(raw);
  for (;;) {
    std::string next = normalize_once(cur);
    if (next == cur) return cur;
    cur = std::move(next);
  }
}

int reward(const Problem& problem, const Trajectory& traj, const AnswerFormat& format) {
  auto ans = extract_answer(traj.response_tokens, format);
  if (!ans) return 0;
  return normalize_answer(ans->text) == normalize_answer(problem.ground_truth) ? 1 : 0;
}

std::vector<TraceRecord> read_trace_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("trace corpus: cannot open " + path);
  std::vector<TraceRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("trace corpus: bad JSON at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    }
    TraceRecord rec;
    rec.problem = j.value("problem", std::string{});
    rec.gold_answer = j.value("gold_answer", std::string{});
    if (j.contains("response_tokens")) rec.response_tokens = j["response_tokens"].get<std::vector<int>>();
    rec.response_text = j.value("response_text", std::string{});
    if (j.contains("metadata")) rec.metadata = j["metadata"].dump();
    records.push_back(std::move(rec));
  }
  return records;
}

void write_trace_corpus(const std::string& path, std::span<const TraceRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("trace corpus: cannot open " + path + " for writing");
  for (const auto& rec : records) {
    json j;
    j["problem"] = rec.problem;
    j["gold_answer"] = rec.gold_answer;
    if (!rec.response_text.empty()) j["response_text"] = rec.response_text;
    else j["response_tokens"] = rec.response_tokens;
    if (!rec.metadata.empty()) j["metadata"] = json::parse(rec.metadata);
    out << j.dump() << '\n';
  }
}

}  // namespace clore
