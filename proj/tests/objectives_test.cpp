#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clore/objectives.hpp"
#include "clore/verify.hpp"

using namespace clore;

namespace {

PolicyConfig test_config(double smoothing = 0.1) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab::kSize;
  cfg.context_window = 4;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 8;
  cfg.smoothing = smoothing;
  cfg.temperature = 1.0;
  return cfg;
}

PreferencePair random_pair(Rng& rng, const PolicyParams& params, const PolicyConfig& cfg) {
  Problem problem = generate_problem(rng, 1);
  Trajectory original = make_random_correct_trajectory(rng, problem);
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

}  // namespace

TEST_CASE("grpo advantages standardize within the group") {
  SUBCASE("alternating rewards") {
    auto adv = grpo_advantages(std::vector<int>{1, 0, 1, 0});
    REQUIRE(adv.size() == 4);
    CHECK(adv[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(adv[1] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(adv[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(adv[3] == doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("zero variance guard") {
    auto adv = grpo_advantages(std::vector<int>{1, 1, 1, 1});
    for (double a : adv) CHECK(a == 0.0);
  }
  SUBCASE("single success in four") {
    auto adv = grpo_advantages(std::vector<int>{1, 0, 0, 0});
    // mean 0.25, population std sqrt(0.1875) = 0.4330127
    CHECK(adv[0] == doctest::Approx(0.75 / 0.43301270189).epsilon(1e-9));
    CHECK(adv[1] == doctest::Approx(-0.25 / 0.43301270189).epsilon(1e-9));
    CHECK(adv[0] == doctest::Approx(1.7320508).epsilon(1e-6));
    CHECK(adv[1] == doctest::Approx(-0.5773503).epsilon(1e-6));
  }
  SUBCASE("group of one is rejected") {
    CHECK_THROWS_AS(grpo_advantages(std::vector<int>{1}), std::invalid_argument);
  }
}

TEST_CASE("pg_loss definition and gradient") {
  PolicyConfig cfg = test_config();
  Rng rng(31);
  PolicyParams params = init_params(cfg, 5);
  Problem problem = generate_problem(rng, 1);
  Trajectory traj = make_random_correct_trajectory(rng, problem);

  SUBCASE("zero advantages give zero loss and gradient") {
    std::vector<const Trajectory*> ts = {&traj};
    std::vector<double> adv = {0.0};
    ScalarWithGrad out = pg_loss(params, cfg, ts, adv);
    CHECK(out.value == 0.0);
    for (double g : out.grad) CHECK(g == 0.0);
  }
  SUBCASE("single trajectory with unit advantage") {
    std::vector<const Trajectory*> ts = {&traj};
    std::vector<double> adv = {1.0};
    ScalarWithGrad out = pg_loss(params, cfg, ts, adv);
    CHECK(out.value ==
          doctest::Approx(-sequence_logprob(params, cfg, traj.prompt_tokens, traj.response_tokens))
              .epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    Problem p2 = generate_problem(rng, 1);
    Trajectory t2 = make_random_correct_trajectory(rng, p2);
    std::vector<const Trajectory*> ts = {&traj, &t2};
    std::vector<double> adv = {0.8, -1.3};
    ScalarWithGrad out = pg_loss(params, cfg, ts, adv);
    auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
      double acc = 0.0;
      acc += -adv[0] * sequence_logprob(p, cfg, traj.prompt_tokens, traj.response_tokens);
      acc += -adv[1] * sequence_logprob(p, cfg, t2.prompt_tokens, t2.response_tokens);
      return acc / 2.0;
    });
    CHECK(max_relative_error(out.grad, fd) <= 1e-4);
  }
}

TEST_CASE("dpo loss values and self-extinguishing fixed point") {
  PolicyConfig cfg = test_config();
  Rng rng(77);
  PolicyParams params = init_params(cfg, 9);
  Problem problem = generate_problem(rng, 1);
  Trajectory traj = make_random_correct_trajectory(rng, problem);

  SUBCASE("identical pair: loss ln 2, gradient exactly zero") {
    PreferencePair pair;
    pair.problem = problem;
    pair.original = traj;
    pair.edited = traj;
    DpoResult r = dpo_loss(params, cfg, pair, 0.9);
    CHECK(r.delta == 0.0);
    CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    for (double g : r.grad) CHECK(g == 0.0);
  }
  SUBCASE("known logit value") {
    // -ln sigma(ln 3) = -ln(3/4)
    CHECK(std::abs(-std::log(1.0 / (1.0 + std::exp(-std::log(3.0)))) - 0.287682) < 1e-6);
    PreferencePair pair = random_pair(rng, params, cfg);
    const double delta = dpo_logit(params, cfg, pair, 1.0);
    DpoResult r = dpo_loss(params, cfg, pair, 1.0);
    CHECK(r.delta == doctest::Approx(delta).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(std::log1p(std::exp(-delta))).epsilon(1e-10));
  }
  SUBCASE("gradient matches finite differences on an accepted pair") {
    PreferencePair pair = random_pair(rng, params, cfg);
    REQUIRE(pair.accepted);
    const double beta = 0.7;
    DpoResult r = dpo_loss(params, cfg, pair, beta);
    auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
      const double d =
          beta * (sequence_logprob(p, cfg, pair.original.prompt_tokens,
                                   pair.original.response_tokens) -
                  sequence_logprob(p, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens));
      return std::max(-d, 0.0) + std::log1p(std::exp(-std::abs(d)));
    });
    CHECK(max_relative_error(r.grad, fd) <= 1e-4);
  }
}

TEST_CASE("length shaping") {
  LossConfig cfg;

  SUBCASE("soft overlong ramp") {
    cfg.length_objective = LengthObjectiveKind::soft_overlong;
    cfg.length_max = 100;
    cfg.length_buffer = 20;
    cfg.penalty_max = 1.0;

    auto traj_of_len = [](int len) {
      Trajectory t;
      t.response_tokens.assign(len, 2);
      return t;
    };
    Trajectory t80 = traj_of_len(80), t90 = traj_of_len(90), t120 = traj_of_len(120);
    std::vector<const Trajectory*> group = {&t80, &t90, &t120};
    auto shaping = length_shaping(group, cfg);
    CHECK(shaping[0] == doctest::Approx(0.0));
    CHECK(shaping[1] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(shaping[2] == doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("multi-sample bonus is zero for equal lengths") {
    cfg.length_objective = LengthObjectiveKind::multi_sample;
    cfg.reward_scale = 1.0;
    Trajectory a, b;
    a.response_tokens.assign(10, 2);
    a.reward = 1;
    b.response_tokens.assign(10, 3);
    b.reward = 1;
    std::vector<const Trajectory*> group = {&a, &b};
    auto shaping = length_shaping(group, cfg);
    CHECK(shaping[0] == 0.0);
    CHECK(shaping[1] == 0.0);
  }
  SUBCASE("multi-sample favors shorter correct rollouts only") {
    cfg.length_objective = LengthObjectiveKind::multi_sample;
    cfg.reward_scale = 2.0;
    Trajectory short_ok, long_ok, short_bad;
    short_ok.response_tokens.assign(5, 2);
    short_ok.reward = 1;
    long_ok.response_tokens.assign(15, 2);
    long_ok.reward = 1;
    short_bad.response_tokens.assign(10, 2);
    short_bad.reward = 0;
    std::vector<const Trajectory*> group = {&short_ok, &long_ok, &short_bad};
    auto shaping = length_shaping(group, cfg);
    CHECK(shaping[0] == doctest::Approx(2.0 * 5.0 / 10.0));
    CHECK(shaping[1] == doctest::Approx(2.0 * -5.0 / 10.0));
    CHECK(shaping[2] == 0.0);
  }
  SUBCASE("misconfigured budgets are rejected") {
    cfg.length_objective = LengthObjectiveKind::soft_overlong;
    cfg.length_max = 10;
    cfg.length_buffer = 10;  // buffer must be < max
    cfg.penalty_max = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
}

TEST_CASE("prune budget truncates the data path") {
  Problem p;
  p.ground_truth = "7";
  Trajectory t;
  t.response_tokens = {vocab::kThink, vocab::kAnsOpen, vocab::digit(7), vocab::kAnsClose,
                       vocab::digit(1), vocab::digit(2), vocab::digit(3), vocab::digit(4),
                       vocab::digit(5), vocab::digit(6), vocab::digit(7), vocab::digit(8)};
  t.token_logprobs.assign(t.response_tokens.size(), -1.0);

  Trajectory cut = apply_prune_budget(t, 8);
  CHECK(cut.response_tokens.size() == 8);
  CHECK(cut.token_logprobs.size() == 8);
  // The answer closed at token 3, so the truncated trace still scores 1.
  CHECK(reward(p, cut, AnswerFormat::markers()) == 1);

  Trajectory untouched = apply_prune_budget(t, 100);
  CHECK(untouched.response_tokens == t.response_tokens);
}

TEST_CASE("joint loss composition") {
  PolicyConfig cfg = test_config();
  Rng rng(123);
  PolicyParams params = init_params(cfg, 3);
  LossConfig loss_cfg;
  loss_cfg.dpo_beta = 0.7;
  loss_cfg.dpo_weight = 0.05;

  PreferencePair pair = random_pair(rng, params, cfg);
  REQUIRE(pair.accepted);
  Problem p2 = generate_problem(rng, 1);
  Trajectory extra = make_random_correct_trajectory(rng, p2);

  JointBatch batch;
  batch.pg_trajectories = {&pair.edited, &extra};
  batch.advantages = {1.2, -0.4};
  batch.shaping_trajectories = {&pair.original, &extra};
  batch.shaping = {0.0, -0.5};
  batch.pairs = {&pair};

  SUBCASE("total decomposes as pg + len + lambda*dpo") {
    LossBreakdown out = joint_loss(params, cfg, loss_cfg, batch);
    CHECK(out.total ==
          doctest::Approx(out.pg_loss + out.length_term + loss_cfg.dpo_weight * out.dpo_loss)
              .epsilon(1e-10));
    CHECK(out.pair_count == 1);
    CHECK(out.accepted_pair_count == 1);
    CHECK(out.per_pair_delta.size() == 1);
    CHECK(out.mean_alpha > 0.0);
    CHECK(out.mean_alpha < loss_cfg.dpo_weight * loss_cfg.dpo_beta);
  }
  SUBCASE("lambda 0 leaves the backbone gradient bitwise untouched") {
    LossConfig without = loss_cfg;
    without.dpo_weight = 0.0;
    LossBreakdown with_pairs = joint_loss(params, cfg, without, batch);

    JointBatch no_pairs = batch;
    no_pairs.pairs.clear();
    LossBreakdown backbone = joint_loss(params, cfg, without, no_pairs);
    CHECK(with_pairs.grad == backbone.grad);
    CHECK(with_pairs.total == backbone.total);
  }
  SUBCASE("a batch of only no-op pairs contributes ln 2 and no gradient") {
    PreferencePair noop;
    noop.problem = pair.problem;
    noop.original = pair.original;
    noop.edited = pair.original;
    noop.accepted = false;
    JointBatch only_noop;
    only_noop.pg_trajectories = {&pair.original};
    only_noop.advantages = {0.0};
    only_noop.pairs = {&noop};
    LossBreakdown out = joint_loss(params, cfg, loss_cfg, only_noop);
    CHECK(out.dpo_loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    for (double g : out.grad) CHECK(g == 0.0);
  }
  SUBCASE("joint gradient matches finite differences") {
    LossBreakdown out = joint_loss(params, cfg, loss_cfg, batch);
    auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
      double pg = 0.0;
      pg += -1.2 * sequence_logprob(p, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens);
      pg += 0.4 * sequence_logprob(p, cfg, extra.prompt_tokens, extra.response_tokens);
      pg /= 2.0;
      const double len =
          0.5 * sequence_logprob(p, cfg, extra.prompt_tokens, extra.response_tokens) / 2.0;
      const double d =
          loss_cfg.dpo_beta *
          (sequence_logprob(p, cfg, pair.original.prompt_tokens, pair.original.response_tokens) -
           sequence_logprob(p, cfg, pair.edited.prompt_tokens, pair.edited.response_tokens));
      const double dpo = std::max(-d, 0.0) + std::log1p(std::exp(-std::abs(d)));
      return pg + len + loss_cfg.dpo_weight * dpo;
    });
    CHECK(max_relative_error(out.grad, fd) <= 1e-4);
  }
}

TEST_CASE("weighted-MLE decomposition agrees with the closed form") {
  PolicyConfig cfg = test_config();
  Rng rng(555);
  LossConfig loss_cfg;
  loss_cfg.dpo_beta = 0.7;
  loss_cfg.dpo_weight = 0.05;

  SUBCASE("random accepted pairs") {
    int accepted = 0;
    while (accepted < 10) {
      PolicyParams params = init_params(cfg, rng.next_u64());
      PreferencePair pair = random_pair(rng, params, cfg);
      if (!pair.accepted) continue;
      ++accepted;
      CHECK(verify_weighted_mle(params, cfg, pair, rng.next_signed_unit(), loss_cfg) <= 1e-8);
    }
  }
  SUBCASE("identity pair reduces both forms to pure PG") {
    PolicyParams params = init_params(cfg, 1);
    Problem problem = generate_problem(rng, 1);
    Trajectory traj = make_random_correct_trajectory(rng, problem);
    PreferencePair pair;
    pair.problem = problem;
    pair.original = traj;
    pair.edited = traj;
    CHECK(verify_weighted_mle(params, cfg, pair, 0.9, loss_cfg) <= 1e-12);
  }
  SUBCASE("lambda 0 reduces to pure PG") {
    LossConfig no_dpo = loss_cfg;
    no_dpo.dpo_weight = 0.0;
    PolicyParams params = init_params(cfg, 2);
    PreferencePair pair = random_pair(rng, params, cfg);
    CHECK(verify_weighted_mle(params, cfg, pair, 1.0, no_dpo) <= 1e-12);
  }
}

TEST_CASE("logit bound under deletion-only edits") {
  PolicyConfig cfg = test_config(0.1);
  Rng rng(808);

  SUBCASE("bound formula") {
    // beta 0.1, T 10, p_min 0.1: bound = 0.1 * 10 * ln 10
    PolicyConfig wide = cfg;
    wide.vocab_size = 10;
    wide.smoothing = 1.0 - 1e-9;  // p_min ~ 0.1
    PolicyParams params = init_params(wide, 4);
    Problem problem;
    problem.ground_truth = "3";
    Trajectory traj;
    traj.prompt_tokens = {vocab::digit(3), vocab::kEquals};
    traj.response_tokens.assign(10, vocab::digit(1) % 10);
    PreferencePair pair;
    pair.problem = problem;
    pair.original = traj;
    pair.edited = traj;
    LogitBoundReport rep = verify_logit_bound(params, wide, pair, 0.1, 0.05);
    CHECK(rep.bound == doctest::Approx(0.1 * 10 * std::log(10.0)).epsilon(1e-6));
    CHECK(rep.abs_delta == 0.0);
    CHECK(rep.holds);
  }
  SUBCASE("holds on random accepted pairs with an active floor") {
    int accepted = 0;
    while (accepted < 200) {
      PolicyParams params = init_params(cfg, rng.next_u64());
      PreferencePair pair = random_pair(rng, params, cfg);
      if (!pair.accepted) continue;
      ++accepted;
      LogitBoundReport rep = verify_logit_bound(params, cfg, pair, 0.7, 0.05);
      CHECK(rep.holds);
      CHECK(rep.alpha_in_range);
      CHECK(rep.alpha <= 0.05 * 0.7);
    }
  }
  SUBCASE("requires an active floor") {
    PolicyConfig raw = cfg;
    raw.smoothing = 0.0;
    PolicyParams params = init_params(raw, 6);
    PreferencePair pair = random_pair(rng, params, raw);
    CHECK_THROWS_AS(verify_logit_bound(params, raw, pair, 1.0, 0.05), std::invalid_argument);
  }
}

TEST_CASE("alpha stays inside (0, lambda*beta) for finite logits") {
  // sigma is strictly inside (0,1), so alpha = lambda*beta*sigma(-Delta)
  // stays strictly inside (0, lambda*beta).
  const double lambda = 0.2, beta = 1.5;
  for (double delta : {-30.0, -2.0, -0.1, 0.0, 0.1, 2.0, 30.0}) {
    const double alpha = lambda * beta * (1.0 / (1.0 + std::exp(delta)));
    CHECK(alpha > 0.0);
    CHECK(alpha < lambda * beta);
  }
}
