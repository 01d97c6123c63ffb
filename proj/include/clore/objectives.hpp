#pragma once

#include <span>
#include <vector>

#include "clore/augment.hpp"
#include "clore/policy.hpp"

namespace clore {

enum class LengthObjectiveKind { none, soft_overlong, multi_sample, prune_budget };
enum class AdvantageKind { grpo, reinforce_baseline };

struct LossConfig {
  double dpo_beta = 1.0;    // preference strength
  double dpo_weight = 0.05; // lambda
  LengthObjectiveKind length_objective = LengthObjectiveKind::none;
  double length_max = 0.0;     // soft_overlong L_max / prune budget
  double length_buffer = 0.0;  // soft_overlong buffer
  double penalty_max = 0.0;    // soft_overlong penalty at L_max
  double reward_scale = 1.0;   // multi_sample bonus scale
  AdvantageKind advantage_kind = AdvantageKind::grpo;
  bool per_token_mean = false;  // ablation only: normalize logprobs by length

  void validate() const;
};

// Group-standardized 0/1 rewards: (r - mean) / population std, all zeros
// when the group has no variance. Throws when the group has fewer than two
// rollouts.
std::vector<double> grpo_advantages(std::span<const int> rewards);

// r - mean baseline variant.
std::vector<double> reinforce_baseline_advantages(std::span<const int> rewards);

struct ScalarWithGrad {
  double value = 0.0;
  std::vector<double> grad;
};

// Mean over the batch of -A_i * log pi(tau_i | x_i), with the analytic
// gradient.
ScalarWithGrad pg_loss(const PolicyParams& params, const PolicyConfig& cfg,
                       std::span<const Trajectory* const> trajectories,
                       std::span<const double> advantages, bool per_token_mean = false);

// Delta = beta * [log pi(tau) - log pi(tau_edited)].
double dpo_logit(const PolicyParams& params, const PolicyConfig& cfg, const PreferencePair& pair,
                 double beta);

struct DpoResult {
  double loss = 0.0;
  double delta = 0.0;
  std::vector<double> grad;
};

// Reference-free preference loss -log sigmoid(Delta) with gradient
// -sigmoid(-Delta) * beta * (grad log pi(tau) - grad log pi(tau_edited)).
DpoResult dpo_loss(const PolicyParams& params, const PolicyConfig& cfg, const PreferencePair& pair,
                   double beta, bool per_token_mean = false);

// Per-trajectory reward-shaping terms for one prompt group.
//   soft_overlong: 0 up to L_max - buffer, linear down to -penalty_max at
//     L_max, clamped beyond.
//   multi_sample: reward_scale * (group mean length - own length) / group
//     mean length, correct trajectories only.
//   prune_budget: all zeros (the budget acts on the data path; see
//     apply_prune_budget).
std::vector<double> length_shaping(std::span<const Trajectory* const> group,
                                   const LossConfig& cfg);

// Hard truncation at the budget; the caller recomputes reward and spans.
Trajectory apply_prune_budget(const Trajectory& traj, int budget);

struct LossBreakdown {
  double pg_loss = 0.0;
  double dpo_loss = 0.0;
  double length_term = 0.0;
  double total = 0.0;
  std::vector<double> per_pair_delta;
  double mean_delta = 0.0;
  double mean_alpha = 0.0;  // alpha = lambda * beta * sigmoid(-Delta)
  int pair_count = 0;
  int accepted_pair_count = 0;
  std::vector<double> grad;
};

// One optimization step's batch. pg items carry the trajectories the
// advantage-weighted term trains on; shaping items carry the sampled
// rollouts the length term applies to.
struct JointBatch {
  std::vector<const Trajectory*> pg_trajectories;
  std::vector<double> advantages;
  std::vector<const Trajectory*> shaping_trajectories;
  std::vector<double> shaping;  // aligned with shaping_trajectories
  std::vector<const PreferencePair*> pairs;
};

// L = L_PG + L_len + lambda * L_DPO, with L_DPO averaged over all pairs
// (accepted and fallback alike) and the gradient assembled with the same
// weights. lambda = 0 leaves the backbone gradient untouched bit for bit.
LossBreakdown joint_loss(const PolicyParams& params, const PolicyConfig& cfg,
                         const LossConfig& loss_cfg, const JointBatch& batch);

// Appendix-style decomposition check: gradient of
// -A log pi(tau_edited) - lambda log sigmoid(Delta) computed by backprop
// versus the closed form -alpha grad log pi(tau) - (A - alpha) grad log
// pi(tau_edited) with alpha = lambda * beta * sigmoid(-Delta). Returns the
// max relative elementwise discrepancy.
double verify_weighted_mle(const PolicyParams& params, const PolicyConfig& cfg,
                           const PreferencePair& pair, double advantage, const LossConfig& loss_cfg);

struct LogitBoundReport {
  double abs_delta = 0.0;
  double bound = 0.0;  // beta * T * |log p_min|
  bool holds = false;
  double alpha = 0.0;
  double lambda_beta = 0.0;
  bool alpha_in_range = false;  // alpha in [0, lambda * beta]
};

// Checks |Delta| <= beta * T * |log p_min| with T the original rollout
// length, and alpha <= lambda * beta.
LogitBoundReport verify_logit_bound(const PolicyParams& params, const PolicyConfig& cfg,
                                    const PreferencePair& pair, double beta, double lambda);

}  // namespace clore
