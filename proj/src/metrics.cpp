#include "clore/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace clore {

void AEWeights::validate() const {
  if (!(w_len > 0.0) || !(w_gain > 0.0) || !(w_loss > 0.0))
    throw std::invalid_argument("ae weights: all weights must be > 0");
}

double rep_n(std::span<const int> tokens, int n, bool* short_sequence) {
  if (n < 1) throw std::invalid_argument("rep_n: n must be >= 1");
  const int total = static_cast<int>(tokens.size()) - n + 1;
  if (short_sequence) *short_sequence = total < 1;
  if (total < 1) return 0.0;
  std::set<std::vector<int>> unique;
  for (int i = 0; i < total; ++i)
    unique.insert(std::vector<int>(tokens.begin() + i, tokens.begin() + i + n));
  return 1.0 - static_cast<double>(unique.size()) / total;
}

int longest_repeated_span(std::span<const int> tokens) {
  const int n = static_cast<int>(tokens.size());
  if (n < 2) return 0;
  // lcp(i, j) = common prefix length of the suffixes at i and j.
  std::vector<int> next(n + 1, 0), cur(n + 1, 0);
  int best = 0;
  for (int i = n - 1; i >= 0; --i) {
    for (int j = n - 1; j > i; --j) {
      cur[j] = tokens[i] == tokens[j] ? next[j + 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(next, cur);
  }
  return best;
}

double post_answer_fraction(std::span<const int> response, std::optional<int> close_index,
                            int stop_token, bool* no_answer) {
  if (no_answer) *no_answer = !close_index.has_value();
  if (!close_index || response.empty()) return 0.0;
  int post = 0;
  for (int i = *close_index + 1; i < static_cast<int>(response.size()); ++i)
    if (response[i] != stop_token) ++post;
  return static_cast<double>(post) / static_cast<double>(response.size());
}

double ae_score(double base_acc, double base_len, double model_acc, double model_len,
                const AEWeights& w) {
  w.validate();
  if (!(base_acc > 0.0) || !(base_len > 0.0))
    throw std::invalid_argument("ae_score: baseline accuracy and length must be > 0");
  const double d_len = (base_len - model_len) / base_len;
  const double d_acc = (model_acc - base_acc) / base_acc;
  if (d_acc >= 0.0) return w.w_len * d_len + w.w_gain * std::abs(d_acc);
  return w.w_len * d_len - w.w_loss * std::abs(d_acc);
}

namespace {

// Maps the closing '}' of the last boxed span to its whitespace-token index.
std::optional<int> boxed_close_token_index(const std::string& text) {
  const size_t pos = text.rfind("\\boxed{");
  if (pos == std::string::npos) return std::nullopt;
  int depth = 0;
  size_t close = std::string::npos;
  for (size_t i = pos + 6; i < text.size(); ++i) {
    if (text[i] == '{') ++depth;
    else if (text[i] == '}') {
      if (--depth == 0) {
        close = i;
        break;
      }
    }
  }
  if (close == std::string::npos) return std::nullopt;
  int token_index = -1;
  bool in_token = false;
  for (size_t i = 0; i <= close; ++i) {
    const bool space = std::isspace(static_cast<unsigned char>(text[i])) != 0;
    if (!space && !in_token) ++token_index;
    in_token = !space;
  }
  return token_index;
}

}  // namespace

TraceMetrics trace_metrics(const TraceRecord& record) {
  TraceMetrics m;
  std::vector<int> ids;
  std::optional<int> close_index;
  int stop_token = -1;
  std::string answer_text;

  if (record.response_text.empty()) {
    ids = record.response_tokens;
    stop_token = vocab::kStop;
    if (auto ans = extract_answer(ids, AnswerFormat::markers())) {
      close_index = ans->span.second;
      answer_text = ans->text;
      m.has_answer = true;
    }
  } else {
    // External text traces: whitespace tokens relabeled to local ids.
    const auto words = whitespace_tokenize(record.response_text);
    std::unordered_map<std::string, int> dict;
    ids.reserve(words.size());
    for (const auto& w : words) {
      auto [it, inserted] = dict.emplace(w, static_cast<int>(dict.size()));
      ids.push_back(it->second);
    }
    if (auto boxed = extract_boxed(record.response_text)) {
      answer_text = *boxed;
      close_index = boxed_close_token_index(record.response_text);
      m.has_answer = close_index.has_value();
    }
  }

  m.length = static_cast<int>(ids.size());
  m.rep_4 = rep_n(ids, 4);
  m.rep_8 = rep_n(ids, 8);
  m.longest_repeated_span = longest_repeated_span(ids);
  m.post_answer_fraction = post_answer_fraction(ids, close_index, stop_token);
  if (m.has_answer && !record.gold_answer.empty())
    m.reward = normalize_answer(answer_text) == normalize_answer(record.gold_answer) ? 1 : 0;
  return m;
}

MetricsReport corpus_report(std::span<const TraceRecord> corpus,
                            std::optional<CorpusBaseline> baseline, const JudgeFn& judge,
                            const AEWeights& weights) {
  if (corpus.empty()) throw std::invalid_argument("corpus_report: empty corpus");
  MetricsReport report;
  report.trace_count = static_cast<int>(corpus.size());

  double judged_sum = 0.0;
  int judged = 0;
  for (const TraceRecord& rec : corpus) {
    const TraceMetrics m = trace_metrics(rec);
    report.accuracy += m.reward;
    report.mean_length += m.length;
    report.rep_4 += m.rep_4;
    report.rep_8 += m.rep_8;
    report.longest_repeated_span += m.longest_repeated_span;
    report.post_answer_fraction += m.post_answer_fraction;
    if (!m.has_answer) ++report.no_answer_count;
    if (judge) {
      const std::string response =
          rec.response_text.empty() ? detokenize(rec.response_tokens) : rec.response_text;
      if (auto score = judge(rec.problem, response)) {
        judged_sum += *score;
        ++judged;
      } else {
        ++report.judge_failure_count;
      }
    }
  }
  const double n = static_cast<double>(report.trace_count);
  report.accuracy /= n;
  report.mean_length /= n;
  report.rep_4 /= n;
  report.rep_8 /= n;
  report.longest_repeated_span /= n;
  report.post_answer_fraction /= n;
  if (judged > 0) report.illegibility_pct = judged_sum / judged;
  if (baseline)
    report.ae_score =
        ae_score(baseline->accuracy, baseline->mean_length, report.accuracy, report.mean_length,
                 weights);
  return report;
}

}  // namespace clore
