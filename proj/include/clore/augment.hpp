#pragma once

#include <functional>
#include <span>
#include <vector>

#include "clore/policy.hpp"
#include "clore/synth_env.hpp"

namespace clore {

struct AugmentConfig {
  int dedup_ngram_min = 2;
  bool strip_post_answer = true;
  bool strip_noise = true;

  void validate() const;  // dedup_ngram_min >= 2
};

struct EditStats {
  int retained = 0;
  int removed = 0;
  int added = 0;
};

// A validated (original, edited) pair. When accepted, edited.response_tokens
// is a subsequence of the original and its reward did not drop; otherwise
// the edited side falls back to the original trajectory.
struct PreferencePair {
  Problem problem;
  Trajectory original;
  Trajectory edited;
  EditStats edit_stats;
  bool accepted = false;
};

// True iff `edited` can be produced by deleting positions of `original`.
bool is_subsequence(std::span<const int> original, std::span<const int> edited);

// Longest-common-subsequence alignment counts. For a true subsequence this
// coincides with the greedy two-pointer scan (retained = |edited|, added = 0);
// otherwise `added` counts edited tokens the alignment cannot place.
EditStats token_edit_stats(std::span<const int> original, std::span<const int> edited);

// Deterministic deletion-only editor for correct synthetic rollouts.
// In order: (1) drop everything after the close of the first answer span,
// keeping a trailing stop token when one exists; (2) collapse immediately
// adjacent repeated blocks of length >= dedup_ngram_min to one copy,
// scanning left to right, longest block first, keeping the earliest copy,
// repeated until stable; (3) drop noise-class tokens. Deletions never touch
// the first answer span, so the output is a subsequence with the same
// answer. Throws std::invalid_argument when the input reward is not 1.
std::vector<int> rule_based_augment(const Trajectory& traj, const AugmentConfig& cfg,
                                    const AnswerFormat& format);

// Per-token logprobs of `response` under the current policy.
using ScoreFn =
    std::function<std::vector<double>(std::span<const int> prompt, std::span<const int> response)>;
using RewardFn = std::function<int(const Problem&, const Trajectory&)>;

// Recomputes the edited trajectory's logprobs under the current parameters
// and applies the acceptance rule: subsequence AND reward(edited) >=
// reward(original). Rejected edits fall back to edited := original.
PreferencePair build_preference_pair(const Problem& problem, const Trajectory& original,
                                     std::vector<int> edited_tokens, const ScoreFn& score,
                                     const RewardFn& reward_fn);

}  // namespace clore
