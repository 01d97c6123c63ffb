#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "clore/policy.hpp"
#include "clore/rng.hpp"
#include "clore/verify.hpp"

using namespace clore;

namespace {

PolicyConfig tiny_config(double smoothing = 0.0, double temperature = 1.0) {
  PolicyConfig cfg;
  cfg.vocab_size = 16;
  cfg.context_window = 4;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 6;
  cfg.smoothing = smoothing;
  cfg.temperature = temperature;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
  std::vector<int> out(len);
  for (int& t : out) t = static_cast<int>(rng.next_below(vocab));
  return out;
}

}  // namespace

TEST_CASE("param count follows the layer shapes") {
  PolicyConfig cfg = tiny_config();
  // 16*8 embeddings + (4*8+1)*6 first layer + (6+1)*16 output head
  CHECK(param_count(cfg) == 16 * 8 + (4 * 8 + 1) * 6 + (6 + 1) * 16);
}

TEST_CASE("init is deterministic per seed and differs across seeds") {
  PolicyConfig cfg = tiny_config();
  PolicyParams a = init_params(cfg, 42);
  PolicyParams b = init_params(cfg, 42);
  CHECK(a.values == b.values);

  PolicyParams c = init_params(cfg, 43);
  CHECK(a.values != c.values);
  for (double v : a.values) CHECK(std::isfinite(v));
}

TEST_CASE("all-zero params with no smoothing give the uniform distribution") {
  PolicyConfig cfg = tiny_config();
  PolicyParams params;
  params.values.assign(param_count(cfg), 0.0);
  std::vector<int> context(cfg.context_window, 0);
  std::vector<double> probs(cfg.vocab_size);
  next_token_distribution(params, cfg, context, probs);
  for (double p : probs) CHECK(p == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("near-full smoothing is uniform regardless of logits") {
  PolicyConfig cfg = tiny_config();
  cfg.smoothing = 1.0 - 1e-12;
  PolicyParams params = init_params(cfg, 7);
  for (double& v : params.values) v *= 50.0;  // make the softmax very peaked
  std::vector<int> context = {1, 2, 3, 4};
  std::vector<double> probs(cfg.vocab_size);
  next_token_distribution(params, cfg, context, probs);
  for (double p : probs) CHECK(p == doctest::Approx(1.0 / 16).epsilon(1e-6));
}

TEST_CASE("probability floor and normalization over random contexts") {
  PolicyConfig cfg = tiny_config(0.1);
  PolicyParams params = init_params(cfg, 3);
  Rng rng(99);
  std::vector<double> probs(cfg.vocab_size);
  for (int trial = 0; trial < 1000; ++trial) {
    auto context = random_tokens(rng, cfg.context_window, cfg.vocab_size);
    next_token_distribution(params, cfg, context, probs);
    double sum = 0.0;
    for (double p : probs) {
      CHECK(p >= cfg.p_min());
      sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("smoothing 0.1 on a 10-token vocabulary floors every entry at 0.01") {
  PolicyConfig cfg = tiny_config(0.1);
  cfg.vocab_size = 10;
  PolicyParams params = init_params(cfg, 11);
  std::vector<int> context = {5, 6, 7, 8};
  std::vector<double> probs(cfg.vocab_size);
  next_token_distribution(params, cfg, context, probs);
  for (double p : probs) CHECK(p >= 0.01);
}

TEST_CASE("corrupted parameters are reported") {
  PolicyConfig cfg = tiny_config();
  PolicyParams params = init_params(cfg, 1);
  params.values[param_count(cfg) - 1] = std::numeric_limits<double>::infinity();
  std::vector<int> context(cfg.context_window, 0);
  std::vector<double> probs(cfg.vocab_size);
  CHECK_THROWS_AS(next_token_distribution(params, cfg, context, probs), std::runtime_error);
}

TEST_CASE("uniform policy logprob is T log(1/V)") {
  PolicyConfig cfg = tiny_config();
  cfg.vocab_size = 4;
  PolicyParams params;
  params.values.assign(param_count(cfg), 0.0);
  std::vector<int> prompt = {0};
  std::vector<int> response = {1, 2, 3};
  CHECK(sequence_logprob(params, cfg, prompt, response) ==
        doctest::Approx(3.0 * std::log(0.25)).epsilon(1e-12));
}

TEST_CASE("single-token response equals that step's log probability") {
  PolicyConfig cfg = tiny_config(0.05);
  PolicyParams params = init_params(cfg, 5);
  std::vector<int> prompt = {3, 1};
  std::vector<int> response = {9};
  std::vector<int> context = {0, 0, 3, 1};  // left-padded last-K window
  std::vector<double> probs(cfg.vocab_size);
  next_token_distribution(params, cfg, context, probs);
  CHECK(sequence_logprob(params, cfg, prompt, response) ==
        doctest::Approx(std::log(probs[9])).epsilon(1e-12));
}

TEST_CASE("sequence logprob matches a step-by-step distribution oracle") {
  PolicyConfig cfg = tiny_config(0.1);
  Rng rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    PolicyParams params = init_params(cfg, rng.next_u64());
    auto prompt = random_tokens(rng, 3, cfg.vocab_size);
    auto response = random_tokens(rng, 8, cfg.vocab_size);

    // Oracle: walk the sequence, query the full distribution, sum logs.
    std::vector<int> all = prompt;
    double expected = 0.0;
    for (size_t t = 0; t < response.size(); ++t) {
      std::vector<int> window(cfg.context_window, 0);
      for (int k = 0; k < cfg.context_window; ++k) {
        const int pos = static_cast<int>(all.size()) - cfg.context_window + k;
        if (pos >= 0) window[k] = all[pos];
      }
      std::vector<double> probs(cfg.vocab_size);
      next_token_distribution(params, cfg, window, probs);
      expected += std::log(probs[response[t]]);
      all.push_back(response[t]);
    }
    CHECK(sequence_logprob(params, cfg, prompt, response) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("logprob bound under the floor") {
  PolicyConfig cfg = tiny_config(0.1);
  Rng rng(77);
  PolicyParams params = init_params(cfg, 8);
  for (int trial = 0; trial < 50; ++trial) {
    auto prompt = random_tokens(rng, 2, cfg.vocab_size);
    auto response = random_tokens(rng, 6, cfg.vocab_size);
    const double lp = sequence_logprob(params, cfg, prompt, response);
    CHECK(lp <= 0.0);
    CHECK(lp >= 6.0 * std::log(cfg.p_min()));
  }
}

TEST_CASE("empty response is rejected") {
  PolicyConfig cfg = tiny_config();
  PolicyParams params = init_params(cfg, 2);
  std::vector<int> prompt = {1};
  CHECK_THROWS_AS(sequence_logprob(params, cfg, prompt, {}), std::invalid_argument);
}

TEST_CASE("analytic gradient matches central finite differences") {
  PolicyConfig cfg = tiny_config(0.1);
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    PolicyParams params = init_params(cfg, rng.next_u64());
    auto prompt = random_tokens(rng, 2, cfg.vocab_size);
    auto response = random_tokens(rng, 5, cfg.vocab_size);
    auto analytic = grad_sequence_logprob(params, cfg, prompt, response);
    auto fd = finite_difference_gradient(params, [&](const PolicyParams& p) {
      return sequence_logprob(p, cfg, prompt, response);
    });
    CHECK(max_relative_error(analytic, fd) <= 1e-4);
  }
}

TEST_CASE("fully smoothed policy has zero gradient") {
  PolicyConfig cfg = tiny_config();
  cfg.smoothing = 1.0 - 1e-15;
  PolicyParams params = init_params(cfg, 3);
  std::vector<int> prompt = {1};
  std::vector<int> response = {2, 3};
  auto grad = grad_sequence_logprob(params, cfg, prompt, response);
  for (double g : grad) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("gradient of a concatenated response is the sum of the parts") {
  PolicyConfig cfg = tiny_config(0.1);
  PolicyParams params = init_params(cfg, 31);
  std::vector<int> prompt = {4, 5};
  std::vector<int> head = {1, 2};
  std::vector<int> tail = {3, 6};
  std::vector<int> both = {1, 2, 3, 6};

  auto g_both = grad_sequence_logprob(params, cfg, prompt, both);
  auto g_head = grad_sequence_logprob(params, cfg, prompt, head);
  // The tail factor conditions on prompt+head, as in the joint factorization.
  std::vector<int> prompt_head = {4, 5, 1, 2};
  auto g_tail = grad_sequence_logprob(params, cfg, prompt_head, tail);
  for (size_t i = 0; i < g_both.size(); ++i)
    CHECK(g_both[i] == doctest::Approx(g_head[i] + g_tail[i]).epsilon(1e-10));
}

TEST_CASE("greedy sampling takes the argmax at every step") {
  PolicyConfig cfg = tiny_config(0.0);
  PolicyParams params = init_params(cfg, 17);
  SamplingConfig sampling;
  sampling.greedy = true;
  sampling.max_len = 6;
  sampling.stop_token = -1;
  Rng rng(5);
  std::vector<int> prompt = {1, 2};
  Trajectory traj = sample_trajectory(params, cfg, prompt, sampling, rng);
  REQUIRE(traj.response_tokens.size() == 6);
  CHECK(traj.hit_max_len);

  std::vector<int> all = prompt;
  for (int token : traj.response_tokens) {
    std::vector<int> window(cfg.context_window, 0);
    for (int k = 0; k < cfg.context_window; ++k) {
      const int pos = static_cast<int>(all.size()) - cfg.context_window + k;
      if (pos >= 0) window[k] = all[pos];
    }
    std::vector<double> probs(cfg.vocab_size);
    next_token_distribution(params, cfg, window, probs);
    const int argmax =
        static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    CHECK(token == argmax);
    all.push_back(token);
  }
}

TEST_CASE("sampling is reproducible for a fixed seed") {
  PolicyConfig cfg = tiny_config(0.1);
  PolicyParams params = init_params(cfg, 23);
  SamplingConfig sampling;
  sampling.temperature = 1.0;
  sampling.top_p = 1.0;
  sampling.max_len = 16;
  sampling.stop_token = 1;
  std::vector<int> prompt = {2, 3};

  Rng rng_a(0), rng_b(0);
  Trajectory a = sample_trajectory(params, cfg, prompt, sampling, rng_a);
  Trajectory b = sample_trajectory(params, cfg, prompt, sampling, rng_b);
  CHECK(a.response_tokens == b.response_tokens);
  CHECK(a.token_logprobs == b.token_logprobs);
}

TEST_CASE("recorded logprobs come from the untruncated training distribution") {
  PolicyConfig cfg = tiny_config(0.1);
  PolicyParams params = init_params(cfg, 29);
  SamplingConfig sampling;
  sampling.temperature = 1.7;  // sampling and training distributions differ
  sampling.top_p = 0.6;
  sampling.max_len = 10;
  sampling.stop_token = -1;
  Rng rng(8);
  std::vector<int> prompt = {2};
  Trajectory traj = sample_trajectory(params, cfg, prompt, sampling, rng);
  auto expected = per_token_logprobs(params, cfg, prompt, traj.response_tokens);
  CHECK(traj.token_logprobs == expected);
  const double sum = std::accumulate(traj.token_logprobs.begin(), traj.token_logprobs.end(), 0.0);
  CHECK(sum == doctest::Approx(sequence_logprob(params, cfg, prompt, traj.response_tokens))
                   .epsilon(1e-12));
}

TEST_CASE("nucleus cut matches the brute-force construction on the uniform policy") {
  PolicyConfig cfg = tiny_config(0.0);
  cfg.vocab_size = 4;
  PolicyParams params;
  params.values.assign(param_count(cfg), 0.0);  // exactly uniform
  SamplingConfig sampling;
  sampling.temperature = 1.0;
  sampling.top_p = 0.7;
  sampling.max_len = 1;
  sampling.stop_token = -1;

  // Brute-force oracle: probabilities 0.25 each, ids ascending on ties, the
  // shortest prefix reaching 0.7 keeps ceil(0.7 * 4) = 3 tokens {0, 1, 2}.
  const int expected_kept = 3;
  std::vector<int> seen(4, 0);
  for (uint64_t seed = 0; seed < 400; ++seed) {
    Rng rng(seed);
    std::vector<int> prompt = {0};
    Trajectory t = sample_trajectory(params, cfg, prompt, sampling, rng);
    REQUIRE(t.response_tokens.size() == 1);
    seen[t.response_tokens[0]] += 1;
  }
  for (int id = 0; id < 4; ++id) {
    if (id < expected_kept) CHECK(seen[id] > 0);
    else CHECK(seen[id] == 0);
  }
}

TEST_CASE("stop token terminates sampling and is kept on the trajectory") {
  PolicyConfig cfg = tiny_config(0.3);  // heavy smoothing so every id appears
  PolicyParams params = init_params(cfg, 13);
  SamplingConfig sampling;
  sampling.max_len = 128;
  sampling.stop_token = 1;
  Rng rng(21);
  std::vector<int> prompt = {2};
  Trajectory t = sample_trajectory(params, cfg, prompt, sampling, rng);
  if (!t.hit_max_len) {
    CHECK(t.response_tokens.back() == 1);
    CHECK(std::count(t.response_tokens.begin(), t.response_tokens.end(), 1) == 1);
  }
}

TEST_CASE("checkpoint round-trips config and parameters") {
  PolicyConfig cfg = tiny_config(0.05, 1.3);
  PolicyParams params = init_params(cfg, 99);
  const std::string path = "policy_test_checkpoint.bin";
  save_checkpoint(path, cfg, params);
  auto [loaded_cfg, loaded_params] = load_checkpoint(path);
  CHECK(loaded_cfg.vocab_size == cfg.vocab_size);
  CHECK(loaded_cfg.context_window == cfg.context_window);
  CHECK(loaded_cfg.embed_dim == cfg.embed_dim);
  CHECK(loaded_cfg.hidden_dim == cfg.hidden_dim);
  CHECK(loaded_cfg.smoothing == cfg.smoothing);
  CHECK(loaded_cfg.temperature == cfg.temperature);
  CHECK(loaded_params.values == params.values);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), std::runtime_error);
}

TEST_CASE("config validation rejects bad fields") {
  PolicyConfig cfg = tiny_config();
  cfg.vocab_size = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.smoothing = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
