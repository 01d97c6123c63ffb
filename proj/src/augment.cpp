#include "clore/augment.hpp"

#include <algorithm>
#include <stdexcept>

namespace clore {

void AugmentConfig::validate() const {
  if (dedup_ngram_min < 2)
    throw std::invalid_argument("augment config: dedup_ngram_min must be >= 2");
}

bool is_subsequence(std::span<const int> original, std::span<const int> edited) {
  size_t j = 0;
  for (size_t i = 0; i < original.size() && j < edited.size(); ++i) {
    if (original[i] == edited[j]) ++j;
  }
  return j == edited.size();
}

EditStats token_edit_stats(std::span<const int> original, std::span<const int> edited) {
  const int n = static_cast<int>(original.size());
  const int m = static_cast<int>(edited.size());
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      cur[j] = original[i - 1] == edited[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  EditStats stats;
  stats.retained = prev[m];
  stats.removed = n - stats.retained;
  stats.added = m - stats.retained;
  return stats;
}

namespace {

// One left-to-right pass collapsing adjacent repeated blocks, longest block
// first, skipping any deletion that would intersect the protected range
// [protect_begin, protect_end]. Returns true when something was deleted.
bool dedup_pass(std::vector<int>& tokens, int min_block, int protect_begin, int protect_end) {
  bool changed = false;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    const int remaining = static_cast<int>(tokens.size()) - i;
    for (int block = remaining / 2; block >= min_block; --block) {
      bool matched = false;
      while (i + 2 * block <= static_cast<int>(tokens.size()) &&
             std::equal(tokens.begin() + i, tokens.begin() + i + block,
                        tokens.begin() + i + block)) {
        const int del_begin = i + block;
        const int del_end = i + 2 * block;  // exclusive
        if (protect_begin >= 0 && del_begin <= protect_end && protect_begin < del_end) break;
        tokens.erase(tokens.begin() + del_begin, tokens.begin() + del_end);
        changed = true;
        matched = true;
        // Protected range shifts left when the deletion precedes it.
        if (protect_begin >= del_end) {
          protect_begin -= block;
          protect_end -= block;
        }
      }
      if (matched) break;  // longest match at this position handled
    }
  }
  return changed;
}

}  // namespace

std::vector<int> rule_based_augment(const Trajectory& traj, const AugmentConfig& cfg,
                                    const AnswerFormat& format) {
  cfg.validate();
  if (traj.reward != 1)
    throw std::invalid_argument("rule_based_augment: only correct rollouts are edited");

  std::vector<int> tokens = traj.response_tokens;
  auto locate = [&]() { return extract_answer(tokens, format); };
  // Protected range covers the first answer span including its markers.
  auto protect = [&](const std::optional<ExtractedAnswer>& ans, int& begin, int& end) {
    begin = ans ? ans->span.first - 1 : -1;
    end = ans ? ans->span.second : -1;
  };

  // Deletions can expose new adjacencies across step boundaries, so the
  // whole sweep repeats until nothing changes.
  for (;;) {
    const std::vector<int> before = tokens;

    if (cfg.strip_post_answer) {
      if (auto ans = locate()) {
        const int close = ans->span.second;
        const bool had_stop =
            std::find(tokens.begin() + close + 1, tokens.end(), vocab::kStop) != tokens.end();
        tokens.resize(close + 1);
        if (had_stop) tokens.push_back(vocab::kStop);
      }
    }

    int protect_begin, protect_end;
    protect(locate(), protect_begin, protect_end);
    while (dedup_pass(tokens, cfg.dedup_ngram_min, protect_begin, protect_end)) {
      protect(locate(), protect_begin, protect_end);
    }

    if (cfg.strip_noise) {
      protect(locate(), protect_begin, protect_end);
      std::vector<int> kept;
      kept.reserve(tokens.size());
      for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
        const bool protected_pos = protect_begin >= 0 && i >= protect_begin && i <= protect_end;
        if (!protected_pos && vocab::is_noise(tokens[i])) continue;
        kept.push_back(tokens[i]);
      }
      tokens = std::move(kept);
    }

    if (tokens == before) return tokens;
  }
}

PreferencePair build_preference_pair(const Problem& problem, const Trajectory& original,
                                     std::vector<int> edited_tokens, const ScoreFn& score,
                                     const RewardFn& reward_fn) {
  PreferencePair pair;
  pair.problem = problem;
  pair.original = original;

  Trajectory edited;
  edited.prompt_tokens = original.prompt_tokens;
  edited.response_tokens = std::move(edited_tokens);

  const bool subseq =
      !edited.response_tokens.empty() &&
      is_subsequence(original.response_tokens, edited.response_tokens);
  if (subseq) {
    edited.token_logprobs = score(edited.prompt_tokens, edited.response_tokens);
    edited.reward = reward_fn(problem, edited);
    if (auto span = extract_answer(edited.response_tokens, AnswerFormat::markers()))
      edited.answer_span = span->span;
    if (edited.reward >= original.reward) {
      pair.edited = std::move(edited);
      pair.accepted = true;
      pair.edit_stats =
          token_edit_stats(pair.original.response_tokens, pair.edited.response_tokens);
      return pair;
    }
  }

  // Fallback: the pair degenerates to (tau, tau) and is a no-op for the
  // preference loss.
  pair.edited = original;
  pair.accepted = false;
  pair.edit_stats = token_edit_stats(pair.original.response_tokens, pair.edited.response_tokens);
  return pair;
}

}  // namespace clore
