#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clore/synth_env.hpp"

namespace clore {

struct AEWeights {
  double w_len = 1.0;   // relative length reduction
  double w_gain = 3.0;  // accuracy improvement
  double w_loss = 5.0;  // accuracy degradation

  void validate() const;  // all > 0
};

// Duplicate n-gram fraction: 1 - unique/total n-grams; 0 (flagged short)
// when the sequence has fewer than n tokens.
double rep_n(std::span<const int> tokens, int n, bool* short_sequence = nullptr);

// Length of the longest contiguous block occurring at two or more start
// positions, overlaps allowed.
int longest_repeated_span(std::span<const int> tokens);

// Share of response tokens strictly after close_index, not counting the
// stop token; 0 (flagged) when there is no answer span.
double post_answer_fraction(std::span<const int> response, std::optional<int> close_index,
                            int stop_token, bool* no_answer = nullptr);

// Accuracy-efficiency trade-off score with relative deltas against the
// baseline:
//   d_len = (len_base - len_model) / len_base
//   d_acc = (acc_model - acc_base) / acc_base
//   score = w_len*d_len + w_gain*|d_acc|   when d_acc >= 0
//           w_len*d_len - w_loss*|d_acc|   when d_acc <  0
double ae_score(double base_acc, double base_len, double model_acc, double model_len,
                const AEWeights& w = {});

struct MetricsReport {
  double accuracy = 0.0;
  double mean_length = 0.0;
  double rep_4 = 0.0;
  double rep_8 = 0.0;
  double longest_repeated_span = 0.0;
  double post_answer_fraction = 0.0;
  std::optional<double> illegibility_pct;
  std::optional<double> ae_score;
  int trace_count = 0;
  int no_answer_count = 0;
  int judge_failure_count = 0;
};

// Returns nullopt on a judge transport or parse failure; failed traces are
// excluded from the illegibility average and counted.
using JudgeFn = std::function<std::optional<double>(const std::string& problem,
                                                    const std::string& response)>;

struct CorpusBaseline {
  double accuracy = 0.0;
  double mean_length = 0.0;
};

// Per-trace metrics averaged over a trace corpus. Records with
// response_tokens use the synthetic vocabulary and marker answers; records
// with response_text are whitespace-tokenized and use boxed answers.
MetricsReport corpus_report(std::span<const TraceRecord> corpus,
                            std::optional<CorpusBaseline> baseline = std::nullopt,
                            const JudgeFn& judge = nullptr, const AEWeights& weights = {});

// Per-trace measurements backing a report row; exposed for the CSV dump.
struct TraceMetrics {
  int reward = 0;
  int length = 0;
  double rep_4 = 0.0;
  double rep_8 = 0.0;
  int longest_repeated_span = 0;
  double post_answer_fraction = 0.0;
  bool has_answer = false;
};
TraceMetrics trace_metrics(const TraceRecord& record);

}  // namespace clore
