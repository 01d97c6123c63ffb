#include "clore/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace clore {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// -log sigmoid(z) = softplus(-z), computed without overflow.
double neg_log_sigmoid(double z) { return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double response_scale(const Trajectory& t, bool per_token_mean) {
  return per_token_mean ? 1.0 / static_cast<double>(t.response_tokens.size()) : 1.0;
}

}  // namespace

void LossConfig::validate() const {
  if (!(dpo_beta > 0.0)) throw std::invalid_argument("loss config: dpo_beta must be > 0");
  if (dpo_weight < 0.0) throw std::invalid_argument("loss config: dpo_weight must be >= 0");
  switch (length_objective) {
    case LengthObjectiveKind::soft_overlong:
      if (!(length_max > 0.0) || !(length_buffer > 0.0) || length_buffer >= length_max)
        throw std::invalid_argument("loss config: soft_overlong needs 0 < buffer < L_max");
      if (penalty_max < 0.0)
        throw std::invalid_argument("loss config: penalty_max must be >= 0");
      break;
    case LengthObjectiveKind::multi_sample:
      if (reward_scale < 0.0)
        throw std::invalid_argument("loss config: reward_scale must be >= 0");
      break;
    case LengthObjectiveKind::prune_budget:
      if (length_max < 1.0)
        throw std::invalid_argument("loss config: prune budget must be >= 1");
      break;
    case LengthObjectiveKind::none:
      break;
  }
}

std::vector<double> grpo_advantages(std::span<const int> rewards) {
  const int n = static_cast<int>(rewards.size());
  if (n < 2) throw std::invalid_argument("grpo_advantages: group size must be >= 2");
  double mean = 0.0;
  for (int r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (int r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  std::vector<double> adv(n, 0.0);
  if (var == 0.0) return adv;
  const double std_dev = std::sqrt(var);
  for (int i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / std_dev;
  return adv;
}

std::vector<double> reinforce_baseline_advantages(std::span<const int> rewards) {
  const int n = static_cast<int>(rewards.size());
  if (n < 2) throw std::invalid_argument("advantages: group size must be >= 2");
  double mean = 0.0;
  for (int r : rewards) mean += r;
  mean /= n;
  std::vector<double> adv(n);
  for (int i = 0; i < n; ++i) adv[i] = rewards[i] - mean;
  return adv;
}

ScalarWithGrad pg_loss(const PolicyParams& params, const PolicyConfig& cfg,
                       std::span<const Trajectory* const> trajectories,
                       std::span<const double> advantages, bool per_token_mean) {
  if (trajectories.size() != advantages.size())
    throw std::invalid_argument("pg_loss: trajectory/advantage size mismatch");
  ScalarWithGrad out;
  out.grad.assign(param_count(cfg), 0.0);
  const int m = static_cast<int>(trajectories.size());
  if (m == 0) return out;
  for (int i = 0; i < m; ++i) {
    const Trajectory& t = *trajectories[i];
    if (!std::isfinite(advantages[i])) throw std::invalid_argument("pg_loss: non-finite advantage");
    const double scale = response_scale(t, per_token_mean);
    const double weight = -advantages[i] * scale / m;
    double lp;
    if (advantages[i] == 0.0) {
      lp = sequence_logprob(params, cfg, t.prompt_tokens, t.response_tokens);
    } else {
      lp = accumulate_grad_sequence_logprob(params, cfg, t.prompt_tokens, t.response_tokens,
                                            weight, out.grad);
    }
    out.value += -advantages[i] * scale * lp / m;
  }
  return out;
}

double dpo_logit(const PolicyParams& params, const PolicyConfig& cfg, const PreferencePair& pair,
                 double beta) {
  const double lp_orig = sequence_logprob(params, cfg, pair.original.prompt_tokens,
                                          pair.original.response_tokens);
  const double lp_edit =
      sequence_logprob(params, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens);
  return beta * (lp_orig - lp_edit);
}

DpoResult dpo_loss(const PolicyParams& params, const PolicyConfig& cfg, const PreferencePair& pair,
                   double beta, bool per_token_mean) {
  const int n = param_count(cfg);
  std::vector<double> grad_orig(n, 0.0), grad_edit(n, 0.0);
  const double s_orig = response_scale(pair.original, per_token_mean);
  const double s_edit = response_scale(pair.edited, per_token_mean);
  const double lp_orig =
      accumulate_grad_sequence_logprob(params, cfg, pair.original.prompt_tokens,
                                       pair.original.response_tokens, s_orig, grad_orig);
  const double lp_edit =
      accumulate_grad_sequence_logprob(params, cfg, pair.edited.prompt_tokens,
                                       pair.edited.response_tokens, s_edit, grad_edit);

  DpoResult out;
  out.delta = beta * (lp_orig * s_orig - lp_edit * s_edit);
  out.loss = neg_log_sigmoid(out.delta);
  // Identical sequences produce bitwise-identical per-logprob gradients, so
  // the difference (and with it the Prop.-2 fixed point) is exactly zero.
  const double coeff = -sigmoid(-out.delta) * beta;
  out.grad.resize(n);
  for (int i = 0; i < n; ++i) out.grad[i] = coeff * (grad_orig[i] - grad_edit[i]);
  return out;
}

std::vector<double> length_shaping(std::span<const Trajectory* const> group,
                                   const LossConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(group.size());
  std::vector<double> shaping(n, 0.0);
  switch (cfg.length_objective) {
    case LengthObjectiveKind::none:
    case LengthObjectiveKind::prune_budget:
      break;
    case LengthObjectiveKind::soft_overlong: {
      const double start = cfg.length_max - cfg.length_buffer;
      for (int i = 0; i < n; ++i) {
        const double len = static_cast<double>(group[i]->response_tokens.size());
        if (len <= start) continue;
        const double frac = (len - start) / cfg.length_buffer;
        shaping[i] = -cfg.penalty_max * std::min(frac, 1.0);
      }
      break;
    }
    case LengthObjectiveKind::multi_sample: {
      double mean_len = 0.0;
      for (const Trajectory* t : group) mean_len += static_cast<double>(t->response_tokens.size());
      mean_len /= std::max(n, 1);
      if (mean_len <= 0.0) break;
      for (int i = 0; i < n; ++i) {
        if (group[i]->reward != 1) continue;
        const double len = static_cast<double>(group[i]->response_tokens.size());
        shaping[i] = cfg.reward_scale * (mean_len - len) / mean_len;
      }
      break;
    }
  }
  return shaping;
}

Trajectory apply_prune_budget(const Trajectory& traj, int budget) {
  if (budget < 1) throw std::invalid_argument("prune budget must be >= 1");
  Trajectory out = traj;
  if (static_cast<int>(out.response_tokens.size()) > budget) {
    out.response_tokens.resize(budget);
    out.token_logprobs.resize(budget);
    out.answer_span.reset();
    out.reward = 0;
    out.hit_max_len = true;
  }
  return out;
}

LossBreakdown joint_loss(const PolicyParams& params, const PolicyConfig& cfg,
                         const LossConfig& loss_cfg, const JointBatch& batch) {
  loss_cfg.validate();
  LossBreakdown out;
  out.grad.assign(param_count(cfg), 0.0);

  ScalarWithGrad pg = pg_loss(params, cfg, batch.pg_trajectories, batch.advantages,
                              loss_cfg.per_token_mean);
  out.pg_loss = pg.value;
  for (size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += pg.grad[i];

  if (!batch.shaping_trajectories.empty()) {
    if (batch.shaping.size() != batch.shaping_trajectories.size())
      throw std::invalid_argument("joint_loss: shaping size mismatch");
    const int s = static_cast<int>(batch.shaping_trajectories.size());
    for (int i = 0; i < s; ++i) {
      if (batch.shaping[i] == 0.0) continue;
      const Trajectory& t = *batch.shaping_trajectories[i];
      const double scale = response_scale(t, loss_cfg.per_token_mean);
      const double weight = -batch.shaping[i] * scale / s;
      const double lp = accumulate_grad_sequence_logprob(params, cfg, t.prompt_tokens,
                                                         t.response_tokens, weight, out.grad);
      out.length_term += -batch.shaping[i] * scale * lp / s;
    }
  }

  if (!batch.pairs.empty()) {
    const int p = static_cast<int>(batch.pairs.size());
    out.pair_count = p;
    double alpha_sum = 0.0;
    for (const PreferencePair* pair : batch.pairs) {
      if (pair->accepted) ++out.accepted_pair_count;
      DpoResult r = dpo_loss(params, cfg, *pair, loss_cfg.dpo_beta, loss_cfg.per_token_mean);
      out.dpo_loss += r.loss / p;
      out.per_pair_delta.push_back(r.delta);
      out.mean_delta += r.delta / p;
      alpha_sum += loss_cfg.dpo_weight * loss_cfg.dpo_beta * sigmoid(-r.delta);
      if (loss_cfg.dpo_weight != 0.0) {
        const double w = loss_cfg.dpo_weight / p;
        for (size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += w * r.grad[i];
      }
    }
    out.mean_alpha = alpha_sum / p;
  }

  out.total = out.pg_loss + out.length_term + loss_cfg.dpo_weight * out.dpo_loss;
  return out;
}

double verify_weighted_mle(const PolicyParams& params, const PolicyConfig& cfg,
                           const PreferencePair& pair, double advantage,
                           const LossConfig& loss_cfg) {
  const int n = param_count(cfg);
  std::vector<double> grad_orig(n, 0.0), grad_edit(n, 0.0);
  const double lp_orig = accumulate_grad_sequence_logprob(
      params, cfg, pair.original.prompt_tokens, pair.original.response_tokens, 1.0, grad_orig);
  const double lp_edit = accumulate_grad_sequence_logprob(
      params, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens, 1.0, grad_edit);

  const double beta = loss_cfg.dpo_beta;
  const double lambda = loss_cfg.dpo_weight;
  const double delta = beta * (lp_orig - lp_edit);
  const double alpha = lambda * beta * sigmoid(-delta);

  // Route (a): gradient of -A log pi(edited) + lambda * (-log sigmoid(Delta))
  // assembled the way the loss code does it.
  // Route (b): the closed-form weighted-MLE coefficients.
  double worst = 0.0;
  double scale = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dpo_grad = -sigmoid(-delta) * beta * (grad_orig[i] - grad_edit[i]);
    const double a = -advantage * grad_edit[i] + lambda * dpo_grad;
    const double b = -alpha * grad_orig[i] - (advantage - alpha) * grad_edit[i];
    worst = std::max(worst, std::abs(a - b));
    scale = std::max({scale, std::abs(a), std::abs(b)});
  }
  return scale > 0.0 ? worst / scale : 0.0;
}

LogitBoundReport verify_logit_bound(const PolicyParams& params, const PolicyConfig& cfg,
                                    const PreferencePair& pair, double beta, double lambda) {
  if (!(cfg.smoothing > 0.0))
    throw std::invalid_argument("verify_logit_bound: requires an active probability floor");
  LogitBoundReport rep;
  const double delta = dpo_logit(params, cfg, pair, beta);
  const double t = static_cast<double>(pair.original.response_tokens.size());
  rep.abs_delta = std::abs(delta);
  rep.bound = beta * t * std::abs(std::log(cfg.p_min()));
  rep.holds = rep.abs_delta <= rep.bound;
  rep.lambda_beta = lambda * beta;
  rep.alpha = lambda * beta * sigmoid(-delta);
  rep.alpha_in_range = rep.alpha >= 0.0 && rep.alpha <= rep.lambda_beta;
  return rep;
}

}  // namespace clore
