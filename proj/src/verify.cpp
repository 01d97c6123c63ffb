#include "clore/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace clore {

Trajectory make_random_correct_trajectory(Rng& rng, const Problem& problem) {
  Trajectory t;
  t.prompt_tokens = problem.prompt_tokens;
  auto& out = t.response_tokens;

  auto push_filler = [&](int count) {
    for (int i = 0; i < count; ++i) {
      switch (rng.next_below(4)) {
        case 0: out.push_back(vocab::digit(static_cast<int>(rng.next_below(10)))); break;
        case 1: out.push_back(vocab::kPlus + static_cast<int>(rng.next_below(3))); break;
        case 2: out.push_back(vocab::kNoiseFirst + static_cast<int>(rng.next_below(4))); break;
        default: out.push_back(vocab::kThink); break;
      }
    }
  };

  out.push_back(vocab::kThink);
  push_filler(static_cast<int>(rng.next_below(8)));
  // Sometimes duplicate the tail block to exercise deduplication.
  if (rng.next_below(2) == 0 && out.size() >= 2) {
    const size_t block = 2 + rng.next_below(3);
    const size_t start = out.size() >= block ? out.size() - block : 0;
    std::vector<int> copy(out.begin() + start, out.end());
    out.insert(out.end(), copy.begin(), copy.end());
  }

  out.push_back(vocab::kAnsOpen);
  auto answer = tokenize(problem.ground_truth);
  out.insert(out.end(), answer->begin(), answer->end());
  out.push_back(vocab::kAnsClose);

  push_filler(static_cast<int>(rng.next_below(6)));
  if (rng.next_below(5) != 0) out.push_back(vocab::kStop);

  t.reward = 1;
  if (auto span = extract_answer(out, AnswerFormat::markers())) t.answer_span = span->span;
  return t;
}

std::vector<double> finite_difference_gradient(
    const PolicyParams& params, const std::function<double(const PolicyParams&)>& loss,
    double step) {
  PolicyParams probe = params;
  std::vector<double> grad(params.values.size());
  for (size_t i = 0; i < params.values.size(); ++i) {
    const double saved = probe.values[i];
    probe.values[i] = saved + step;
    const double hi = loss(probe);
    probe.values[i] = saved - step;
    const double lo = loss(probe);
    probe.values[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> fd) {
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), 1e-4});
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

namespace {

PolicyConfig small_config(double smoothing) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab::kSize;
  cfg.context_window = 4;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 8;
  cfg.smoothing = smoothing;
  cfg.temperature = 1.0;
  return cfg;
}

PreferencePair make_random_pair(Rng& rng, const PolicyParams& params, const PolicyConfig& cfg) {
  Problem problem = generate_problem(rng, 1);
  Trajectory original = make_random_correct_trajectory(rng, problem);
  original.token_logprobs =
      per_token_logprobs(params, cfg, original.prompt_tokens, original.response_tokens);

  AugmentConfig aug;
  std::vector<int> edited = rule_based_augment(original, aug, AnswerFormat::markers());
  const auto score = [&](std::span<const int> prompt, std::span<const int> response) {
    return per_token_logprobs(params, cfg, prompt, response);
  };
  const auto reward_fn = [](const Problem& p, const Trajectory& t) {
    return reward(p, t, AnswerFormat::markers());
  };
  return build_preference_pair(problem, original, std::move(edited), score, reward_fn);
}

VerifySuiteResult check_self_extinguishing(Rng& rng) {
  VerifySuiteResult res{"prop2_self_extinguishing_fixed_point"};
  const PolicyConfig cfg = small_config(0.1);
  double worst_loss_err = 0.0, worst_grad_norm = 0.0;
  for (int i = 0; i < 100; ++i) {
    const PolicyParams params = init_params(cfg, rng.next_u64());
    Problem problem = generate_problem(rng, 1);
    Trajectory traj = make_random_correct_trajectory(rng, problem);
    PreferencePair pair;
    pair.problem = problem;
    pair.original = traj;
    pair.edited = traj;  // the no-edit fixed point
    pair.accepted = true;

    DpoResult dpo = dpo_loss(params, cfg, pair, 0.7);
    worst_loss_err = std::max(worst_loss_err, std::abs(dpo.loss - std::log(2.0)));
    double norm = 0.0;
    for (double g : dpo.grad) norm += g * g;
    worst_grad_norm = std::max(worst_grad_norm, std::sqrt(norm));
  }
  res.passed = worst_loss_err <= 1e-12 && worst_grad_norm <= 1e-10;
  std::ostringstream os;
  os << "max |loss - ln 2| = " << worst_loss_err << ", max grad norm = " << worst_grad_norm;
  res.detail = os.str();
  return res;
}

VerifySuiteResult check_weighted_mle(Rng& rng) {
  VerifySuiteResult res{"prop1_weighted_mle_decomposition"};
  const PolicyConfig cfg = small_config(0.1);
  LossConfig loss_cfg;
  loss_cfg.dpo_beta = 0.7;
  loss_cfg.dpo_weight = 0.05;
  double worst = 0.0;
  int accepted = 0;
  while (accepted < 50) {
    const PolicyParams params = init_params(cfg, rng.next_u64());
    PreferencePair pair = make_random_pair(rng, params, cfg);
    if (!pair.accepted) continue;
    ++accepted;
    const double advantage = rng.next_signed_unit() * 2.0;
    worst = std::max(worst, verify_weighted_mle(params, cfg, pair, advantage, loss_cfg));
  }
  res.passed = worst <= 1e-8;
  std::ostringstream os;
  os << "max relative discrepancy over 50 accepted pairs = " << worst;
  res.detail = os.str();
  return res;
}

VerifySuiteResult check_logit_bound(Rng& rng) {
  VerifySuiteResult res{"lemma_bounded_dpo_logit"};
  const PolicyConfig cfg = small_config(0.1);
  const double beta = 0.7, lambda = 0.05;
  int ok = 0, accepted = 0;
  for (int i = 0; i < 1000; ++i) {
    const PolicyParams params = init_params(cfg, rng.next_u64());
    PreferencePair pair = make_random_pair(rng, params, cfg);
    if (!pair.accepted) continue;
    ++accepted;
    LogitBoundReport rep = verify_logit_bound(params, cfg, pair, beta, lambda);
    if (rep.holds && rep.alpha_in_range) ++ok;
  }
  res.passed = accepted > 0 && ok == accepted;
  std::ostringstream os;
  os << ok << "/" << accepted << " accepted pairs within beta*T*|ln p_min| with alpha <= lambda*beta";
  res.detail = os.str();
  return res;
}

VerifySuiteResult check_gradients(Rng& rng) {
  VerifySuiteResult res{"gradient_finite_difference_check"};
  const PolicyConfig cfg = small_config(0.1);
  LossConfig loss_cfg;
  loss_cfg.dpo_beta = 0.7;
  loss_cfg.dpo_weight = 0.05;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const PolicyParams params = init_params(cfg, rng.next_u64());
    PreferencePair pair = make_random_pair(rng, params, cfg);
    Problem extra_problem = generate_problem(rng, 1);
    Trajectory extra = make_random_correct_trajectory(rng, extra_problem);
    const double adv0 = rng.next_signed_unit() * 2.0;
    const double adv1 = rng.next_signed_unit() * 2.0;

    JointBatch batch;
    batch.pg_trajectories = {&pair.edited, &extra};
    batch.advantages = {adv0, adv1};
    batch.shaping_trajectories = {&pair.original, &extra};
    batch.shaping = {0.0, -0.25};
    batch.pairs = {&pair};

    switch (i % 3) {
      case 0: {  // policy-gradient term alone
        ScalarWithGrad pg = pg_loss(params, cfg, batch.pg_trajectories, batch.advantages);
        auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
          double acc = 0.0;
          acc += -adv0 * sequence_logprob(p, cfg, pair.edited.prompt_tokens,
                                          pair.edited.response_tokens);
          acc += -adv1 * sequence_logprob(p, cfg, extra.prompt_tokens, extra.response_tokens);
          return acc / 2.0;
        });
        worst = std::max(worst, max_relative_error(pg.grad, fd));
        break;
      }
      case 1: {  // preference term alone
        DpoResult dpo = dpo_loss(params, cfg, pair, loss_cfg.dpo_beta);
        auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
          const double delta =
              loss_cfg.dpo_beta *
              (sequence_logprob(p, cfg, pair.original.prompt_tokens, pair.original.response_tokens) -
               sequence_logprob(p, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens));
          return std::max(-delta, 0.0) + std::log1p(std::exp(-std::abs(delta)));
        });
        worst = std::max(worst, max_relative_error(dpo.grad, fd));
        break;
      }
      default: {  // joint objective
        LossBreakdown joint = joint_loss(params, cfg, loss_cfg, batch);
        auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
          double pg = 0.0;
          pg += -adv0 * sequence_logprob(p, cfg, pair.edited.prompt_tokens,
                                         pair.edited.response_tokens);
          pg += -adv1 * sequence_logprob(p, cfg, extra.prompt_tokens, extra.response_tokens);
          pg /= 2.0;
          double len = 0.0;
          len += 0.25 * sequence_logprob(p, cfg, extra.prompt_tokens, extra.response_tokens) / 2.0;
          const double delta =
              loss_cfg.dpo_beta *
              (sequence_logprob(p, cfg, pair.original.prompt_tokens, pair.original.response_tokens) -
               sequence_logprob(p, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens));
          const double dpo = std::max(-delta, 0.0) + std::log1p(std::exp(-std::abs(delta)));
          return pg + len + loss_cfg.dpo_weight * dpo;
        });
        worst = std::max(worst, max_relative_error(joint.grad, fd));
        break;
      }
    }
  }
  res.passed = worst <= 1e-4;
  std::ostringstream os;
  os << "max relative error vs central differences over 20 instances = " << worst;
  res.detail = os.str();
  return res;
}

}  // namespace

std::vector<VerifySuiteResult> run_verification_suites(uint64_t seed) {
  Rng rng(seed);
  std::vector<VerifySuiteResult> results;
  results.push_back(check_self_extinguishing(rng));
  results.push_back(check_weighted_mle(rng));
  results.push_back(check_logit_bound(rng));
  results.push_back(check_gradients(rng));
  return results;
}

}  // namespace clore
