#include "clore/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace clore {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ----------------------------- config JSON -----------------------------

namespace {

const char* augmenter_name(AugmenterKind k) {
  switch (k) {
    case AugmenterKind::rule_based: return "rule_based";
    case AugmenterKind::external_llm: return "external_llm";
    default: return "off";
  }
}

AugmenterKind augmenter_from(const std::string& s) {
  if (s == "rule_based") return AugmenterKind::rule_based;
  if (s == "external_llm") return AugmenterKind::external_llm;
  if (s == "off") return AugmenterKind::off;
  throw std::invalid_argument("config: unknown augmenter_kind '" + s + "'");
}

const char* length_objective_name(LengthObjectiveKind k) {
  switch (k) {
    case LengthObjectiveKind::soft_overlong: return "soft_overlong";
    case LengthObjectiveKind::multi_sample: return "multi_sample";
    case LengthObjectiveKind::prune_budget: return "prune_budget";
    default: return "none";
  }
}

LengthObjectiveKind length_objective_from(const std::string& s) {
  if (s == "none") return LengthObjectiveKind::none;
  if (s == "soft_overlong") return LengthObjectiveKind::soft_overlong;
  if (s == "multi_sample") return LengthObjectiveKind::multi_sample;
  if (s == "prune_budget") return LengthObjectiveKind::prune_budget;
  throw std::invalid_argument("config: unknown length_objective '" + s + "'");
}

json sampling_to_json(const SamplingConfig& s) {
  return json{{"temperature", s.temperature},
              {"top_p", s.top_p},
              {"max_len", s.max_len},
              {"greedy", s.greedy}};
}

SamplingConfig sampling_from_json(const json& j, const SamplingConfig& defaults) {
  SamplingConfig s = defaults;
  s.temperature = j.value("temperature", s.temperature);
  s.top_p = j.value("top_p", s.top_p);
  s.max_len = j.value("max_len", s.max_len);
  s.greedy = j.value("greedy", s.greedy);
  s.stop_token = vocab::kStop;
  return s;
}

json config_to_json(const TrainConfig& c) {
  json j;
  j["policy"] = {{"vocab_size", c.policy.vocab_size},
                 {"context_window", c.policy.context_window},
                 {"embed_dim", c.policy.embed_dim},
                 {"hidden_dim", c.policy.hidden_dim},
                 {"smoothing", c.policy.smoothing},
                 {"temperature", c.policy.temperature}};
  j["loss"] = {{"dpo_beta", c.loss.dpo_beta},
               {"dpo_weight", c.loss.dpo_weight},
               {"length_objective", length_objective_name(c.loss.length_objective)},
               {"length_max", c.loss.length_max},
               {"length_buffer", c.loss.length_buffer},
               {"penalty_max", c.loss.penalty_max},
               {"reward_scale", c.loss.reward_scale},
               {"advantage_kind",
                c.loss.advantage_kind == AdvantageKind::grpo ? "grpo" : "reinforce_baseline"},
               {"per_token_mean", c.loss.per_token_mean}};
  j["augment"] = {{"dedup_ngram_min", c.augment.dedup_ngram_min},
                  {"strip_post_answer", c.augment.strip_post_answer},
                  {"strip_noise", c.augment.strip_noise}};
  j["augmenter_kind"] = augmenter_name(c.augmenter_kind);
  if (c.endpoint) {
    j["endpoint"] = {{"base_url", c.endpoint->base_url},
                     {"model_name", c.endpoint->model_name},
                     {"api_key_env", c.endpoint->api_key_env},
                     {"timeout_seconds", c.endpoint->timeout_seconds},
                     {"max_retries", c.endpoint->max_retries},
                     {"backoff_base_seconds", c.endpoint->backoff_base_seconds},
                     {"max_concurrent", c.endpoint->max_concurrent},
                     {"max_token_slack", c.endpoint->max_token_slack},
                     {"fewshot_path", c.endpoint->fewshot_path}};
  }
  j["group_size"] = c.group_size;
  j["prompts_per_step"] = c.prompts_per_step;
  j["steps"] = c.steps;
  j["difficulty"] = c.difficulty;
  j["warmup_steps"] = c.warmup_steps;
  j["warmup_batch"] = c.warmup_batch;
  j["warmup_lr"] = c.warmup_lr;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["eval_every"] = c.eval_every;
  j["eval_set_size"] = c.eval_set_size;
  j["seeds"] = {{"data", c.seeds.data},
                {"policy", c.seeds.policy},
                {"sampling", c.seeds.sampling},
                {"eval", c.seeds.eval}};
  j["train_sampling"] = sampling_to_json(c.train_sampling);
  j["eval_sampling"] = sampling_to_json(c.eval_sampling);
  j["out_dir"] = c.out_dir;
  return j;
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("policy")) {
    const json& p = j["policy"];
    c.policy.vocab_size = p.value("vocab_size", c.policy.vocab_size);
    c.policy.context_window = p.value("context_window", c.policy.context_window);
    c.policy.embed_dim = p.value("embed_dim", c.policy.embed_dim);
    c.policy.hidden_dim = p.value("hidden_dim", c.policy.hidden_dim);
    c.policy.smoothing = p.value("smoothing", c.policy.smoothing);
    c.policy.temperature = p.value("temperature", c.policy.temperature);
  }
  if (j.contains("loss")) {
    const json& l = j["loss"];
    c.loss.dpo_beta = l.value("dpo_beta", c.loss.dpo_beta);
    c.loss.dpo_weight = l.value("dpo_weight", c.loss.dpo_weight);
    if (l.contains("length_objective"))
      c.loss.length_objective = length_objective_from(l["length_objective"].get<std::string>());
    c.loss.length_max = l.value("length_max", c.loss.length_max);
    c.loss.length_buffer = l.value("length_buffer", c.loss.length_buffer);
    c.loss.penalty_max = l.value("penalty_max", c.loss.penalty_max);
    c.loss.reward_scale = l.value("reward_scale", c.loss.reward_scale);
    if (l.contains("advantage_kind")) {
      const std::string a = l["advantage_kind"].get<std::string>();
      if (a == "grpo") c.loss.advantage_kind = AdvantageKind::grpo;
      else if (a == "reinforce_baseline") c.loss.advantage_kind = AdvantageKind::reinforce_baseline;
      else throw std::invalid_argument("config: unknown advantage_kind '" + a + "'");
    }
    c.loss.per_token_mean = l.value("per_token_mean", c.loss.per_token_mean);
  }
  if (j.contains("augment")) {
    const json& a = j["augment"];
    c.augment.dedup_ngram_min = a.value("dedup_ngram_min", c.augment.dedup_ngram_min);
    c.augment.strip_post_answer = a.value("strip_post_answer", c.augment.strip_post_answer);
    c.augment.strip_noise = a.value("strip_noise", c.augment.strip_noise);
  }
  if (j.contains("augmenter_kind"))
    c.augmenter_kind = augmenter_from(j["augmenter_kind"].get<std::string>());
  if (j.contains("endpoint") && !j["endpoint"].is_null()) {
    const json& e = j["endpoint"];
    EndpointConfig ep;
    ep.base_url = e.value("base_url", ep.base_url);
    ep.model_name = e.value("model_name", ep.model_name);
    ep.api_key_env = e.value("api_key_env", ep.api_key_env);
    ep.timeout_seconds = e.value("timeout_seconds", ep.timeout_seconds);
    ep.max_retries = e.value("max_retries", ep.max_retries);
    ep.backoff_base_seconds = e.value("backoff_base_seconds", ep.backoff_base_seconds);
    ep.max_concurrent = e.value("max_concurrent", ep.max_concurrent);
    ep.max_token_slack = e.value("max_token_slack", ep.max_token_slack);
    ep.fewshot_path = e.value("fewshot_path", ep.fewshot_path);
    c.endpoint = ep;
  }
  c.group_size = j.value("group_size", c.group_size);
  c.prompts_per_step = j.value("prompts_per_step", c.prompts_per_step);
  c.steps = j.value("steps", c.steps);
  c.difficulty = j.value("difficulty", c.difficulty);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.warmup_batch = j.value("warmup_batch", c.warmup_batch);
  c.warmup_lr = j.value("warmup_lr", c.warmup_lr);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_set_size = j.value("eval_set_size", c.eval_set_size);
  if (j.contains("seeds")) {
    const json& s = j["seeds"];
    c.seeds.data = s.value("data", c.seeds.data);
    c.seeds.policy = s.value("policy", c.seeds.policy);
    c.seeds.sampling = s.value("sampling", c.seeds.sampling);
    c.seeds.eval = s.value("eval", c.seeds.eval);
  }
  if (j.contains("train_sampling"))
    c.train_sampling = sampling_from_json(j["train_sampling"], c.train_sampling);
  if (j.contains("eval_sampling"))
    c.eval_sampling = sampling_from_json(j["eval_sampling"], c.eval_sampling);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

// Mixes a base seed with a step counter into an independent stream seed.
uint64_t mix_seed(uint64_t base, uint64_t salt) {
  uint64_t s = base;
  const uint64_t a = Rng::splitmix64(s);
  s = a ^ (salt * 0x9E3779B97F4A7C15ULL);
  return Rng::splitmix64(s);
}

}  // namespace

void TrainConfig::validate() const {
  policy.validate();
  loss.validate();
  augment.validate();
  if (policy.vocab_size != vocab::kSize)
    throw std::invalid_argument("config: policy vocab_size must match the synthetic vocabulary (" +
                                std::to_string(vocab::kSize) + ")");
  if (group_size < 2) throw std::invalid_argument("config: group_size must be >= 2");
  if (prompts_per_step < 1) throw std::invalid_argument("config: prompts_per_step must be >= 1");
  if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
  if (difficulty < 1 || difficulty > 4)
    throw std::invalid_argument("config: difficulty must be in [1, 4]");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("config: learning_rate must be >= 0");
  if (warmup_steps < 0 || warmup_batch < 1 || !(warmup_lr > 0.0))
    throw std::invalid_argument("config: bad warmup settings");
  if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
  if (eval_set_size < 1) throw std::invalid_argument("config: eval_set_size must be >= 1");
  if (train_sampling.max_len < 1 || eval_sampling.max_len < 1)
    throw std::invalid_argument("config: sampling max_len must be >= 1");
  if (augmenter_kind == AugmenterKind::external_llm && !endpoint)
    throw std::invalid_argument("config: external_llm augmenter needs an endpoint");
  if (endpoint) endpoint->validate();
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json j = json::parse(in);
  TrainConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << config_to_json(cfg).dump(2) << '\n';
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j = config_to_json(cfg);
  json* node = &j;
  size_t start = 0;
  for (;;) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw std::invalid_argument("override: empty key in " + path);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
  cfg = config_from_json(j);
}

// ----------------------------- optimizer -----------------------------

void Adam::init(int n) {
  m.assign(n, 0.0);
  v.assign(n, 0.0);
  t = 0;
}

void Adam::step(std::vector<double>& params, const std::vector<double>& grad) {
  if (params.size() != grad.size() || params.size() != m.size())
    throw std::invalid_argument("adam: size mismatch");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// ----------------------------- logging -----------------------------

std::string step_log_json(const StepLog& log) {
  json j;
  j["step"] = log.step;
  j["mean_len"] = log.mean_rollout_length;
  j["acc"] = log.train_accuracy;
  j["pg"] = log.pg;
  j["dpo"] = log.dpo;
  j["len"] = log.len;
  j["total"] = log.total;
  j["mean_delta"] = log.mean_delta;
  j["mean_alpha"] = log.mean_alpha;
  j["pairs"] = log.pair_count;
  j["accepted"] = log.accepted_pair_count;
  j["acceptance_rate"] = log.acceptance_rate;
  j["retained"] = log.retained_frac;
  j["removed"] = log.removed_frac;
  j["added"] = log.added_frac;
  j["llm_fallbacks"] = log.llm_fallback_count;
  return j.dump();
}

std::string eval_log_json(int step, const EvalResult& eval) {
  json j;
  j["step"] = step;
  j["accuracy"] = eval.accuracy;
  j["mean_length"] = eval.mean_length;
  j["rep_4"] = eval.report.rep_4;
  j["rep_8"] = eval.report.rep_8;
  j["longest_repeated_span"] = eval.report.longest_repeated_span;
  j["post_answer_fraction"] = eval.report.post_answer_fraction;
  j["no_answer_count"] = eval.report.no_answer_count;
  return j.dump();
}

// ----------------------------- training loop -----------------------------

Trajectory make_demo_trajectory(Rng& rng, const Problem& problem) {
  Trajectory t;
  t.prompt_tokens = problem.prompt_tokens;
  auto& out = t.response_tokens;

  std::vector<int> block = problem.prompt_tokens;  // "expr =" recomputed aloud
  const auto answer = tokenize(problem.ground_truth);
  block.insert(block.end(), answer->begin(), answer->end());

  auto push_noise = [&](int count) {
    for (int i = 0; i < count; ++i)
      out.push_back(vocab::kNoiseFirst + static_cast<int>(rng.next_below(4)));
  };

  out.push_back(vocab::kThink);
  out.insert(out.end(), block.begin(), block.end());
  if (rng.next_below(2) == 0) out.insert(out.end(), block.begin(), block.end());
  if (rng.next_below(10) < 7) push_noise(1 + static_cast<int>(rng.next_below(3)));

  out.push_back(vocab::kAnsOpen);
  out.insert(out.end(), answer->begin(), answer->end());
  out.push_back(vocab::kAnsClose);

  if (rng.next_below(10) < 8) {
    if (rng.next_below(2) == 0) out.insert(out.end(), block.begin(), block.end());
    if (rng.next_below(2) == 0) push_noise(1 + static_cast<int>(rng.next_below(4)));
  }
  out.push_back(vocab::kStop);

  t.reward = 1;
  if (auto span = extract_answer(out, AnswerFormat::markers())) t.answer_span = span->span;
  return t;
}

TrainerState init_trainer(const TrainConfig& cfg) {
  cfg.validate();
  TrainerState st;
  st.config = cfg;
  st.params = init_params(cfg.policy, cfg.seeds.policy);
  st.opt.lr = cfg.learning_rate;
  st.opt.beta1 = cfg.adam_beta1;
  st.opt.beta2 = cfg.adam_beta2;
  st.opt.eps = cfg.adam_eps;
  st.opt.init(param_count(cfg.policy));
  st.data_rng.reseed(cfg.seeds.data);
  st.sampling_rng.reseed(cfg.seeds.sampling);
  st.step = 0;

  if (cfg.warmup_steps > 0) {
    Rng warmup_rng(mix_seed(cfg.seeds.policy, 0x57524d55));  // "WRMU"
    Adam warmup_opt;
    warmup_opt.lr = cfg.warmup_lr;
    warmup_opt.init(param_count(cfg.policy));
    std::vector<double> grad(param_count(cfg.policy));
    for (int step = 0; step < cfg.warmup_steps; ++step) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (int b = 0; b < cfg.warmup_batch; ++b) {
        const Problem problem = generate_problem(warmup_rng, cfg.difficulty);
        const Trajectory demo = make_demo_trajectory(warmup_rng, problem);
        accumulate_grad_sequence_logprob(st.params, cfg.policy, demo.prompt_tokens,
                                         demo.response_tokens, -1.0 / cfg.warmup_batch, grad);
      }
      warmup_opt.step(st.params.values, grad);
    }
  }

  Rng eval_rng(cfg.seeds.eval);
  st.eval_problems.reserve(cfg.eval_set_size);
  for (int i = 0; i < cfg.eval_set_size; ++i)
    st.eval_problems.push_back(generate_problem(eval_rng, cfg.difficulty));

  if (cfg.augmenter_kind == AugmenterKind::external_llm) {
    const std::string path = cfg.endpoint->fewshot_path.empty()
                                 ? default_fewshot_path(AnswerFormat::Kind::marker_pair)
                                 : cfg.endpoint->fewshot_path;
    st.fewshot = load_fewshot(path);
  }
  return st;
}

namespace {

struct GroupData {
  Problem problem;
  std::vector<Trajectory> rollouts;
  std::vector<int> rewards;
  std::vector<double> advantages;
  std::vector<double> shaping;
  std::vector<PreferencePair> pairs;
  std::vector<int> pair_rollout_index;
};

}  // namespace

StepLog train_step(TrainerState& state) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& cfg = state.config;
  const AnswerFormat fmt = AnswerFormat::markers();

  const RewardFn reward_fn = [&fmt](const Problem& p, const Trajectory& t) {
    return reward(p, t, fmt);
  };
  const ScoreFn score_fn = [&](std::span<const int> prompt, std::span<const int> response) {
    return per_token_logprobs(state.params, cfg.policy, prompt, response);
  };

  StepLog log;
  log.step = state.step + 1;

  std::vector<GroupData> groups(cfg.prompts_per_step);
  long long rollout_tokens = 0;
  int rollout_count = 0, correct_count = 0;
  for (GroupData& g : groups) {
    g.problem = generate_problem(state.data_rng, cfg.difficulty);
    g.rollouts.reserve(cfg.group_size);
    for (int i = 0; i < cfg.group_size; ++i) {
      Trajectory t = sample_trajectory(state.params, cfg.policy, g.problem.prompt_tokens,
                                       cfg.train_sampling, state.sampling_rng);
      if (cfg.loss.length_objective == LengthObjectiveKind::prune_budget)
        t = apply_prune_budget(t, static_cast<int>(cfg.loss.length_max));
      t.reward = reward_fn(g.problem, t);
      if (auto ans = extract_answer(t.response_tokens, fmt)) t.answer_span = ans->span;
      rollout_tokens += static_cast<long long>(t.response_tokens.size());
      ++rollout_count;
      correct_count += t.reward;
      g.rewards.push_back(t.reward);
      g.rollouts.push_back(std::move(t));
    }
    g.advantages = cfg.loss.advantage_kind == AdvantageKind::grpo
                       ? grpo_advantages(g.rewards)
                       : reinforce_baseline_advantages(g.rewards);

    std::vector<const Trajectory*> group_ptrs;
    group_ptrs.reserve(g.rollouts.size());
    for (const Trajectory& t : g.rollouts) group_ptrs.push_back(&t);
    g.shaping = length_shaping(group_ptrs, cfg.loss);

    if (cfg.augmenter_kind == AugmenterKind::off) continue;
    for (int i = 0; i < cfg.group_size; ++i) {
      if (g.rollouts[i].reward != 1) continue;  // only correct rollouts reach the editor
      std::vector<int> edited;
      if (cfg.augmenter_kind == AugmenterKind::external_llm) {
        try {
          LlmAugmentResult r = llm_augment(g.problem, g.rollouts[i], *cfg.endpoint, *state.fewshot);
          if (r.accepted) {
            edited = std::move(r.tokens);
          } else if (r.rejection_cause.rfind("transport:", 0) == 0) {
            edited = rule_based_augment(g.rollouts[i], cfg.augment, fmt);
            ++log.llm_fallback_count;
          }
          // Content rejections keep `edited` empty; the pair builder
          // degrades them to the no-op pair.
        } catch (const std::exception&) {
          edited = rule_based_augment(g.rollouts[i], cfg.augment, fmt);
          ++log.llm_fallback_count;
        }
      } else {
        edited = rule_based_augment(g.rollouts[i], cfg.augment, fmt);
      }
      g.pairs.push_back(
          build_preference_pair(g.problem, g.rollouts[i], std::move(edited), score_fn, reward_fn));
      g.pair_rollout_index.push_back(i);
    }
  }

  JointBatch batch;
  long long pair_orig_tokens = 0, pair_retained = 0, pair_removed = 0, pair_added = 0;
  for (GroupData& g : groups) {
    std::vector<const Trajectory*> pg_for_rollout(g.rollouts.size(), nullptr);
    for (size_t k = 0; k < g.pairs.size(); ++k)
      pg_for_rollout[g.pair_rollout_index[k]] = &g.pairs[k].edited;
    for (size_t i = 0; i < g.rollouts.size(); ++i) {
      batch.pg_trajectories.push_back(pg_for_rollout[i] ? pg_for_rollout[i] : &g.rollouts[i]);
      batch.advantages.push_back(g.advantages[i]);
      batch.shaping_trajectories.push_back(&g.rollouts[i]);
      batch.shaping.push_back(g.shaping[i]);
    }
    for (const PreferencePair& pair : g.pairs) {
      batch.pairs.push_back(&pair);
      pair_orig_tokens += static_cast<long long>(pair.original.response_tokens.size());
      pair_retained += pair.edit_stats.retained;
      pair_removed += pair.edit_stats.removed;
      pair_added += pair.edit_stats.added;
    }
  }

  LossBreakdown breakdown = joint_loss(state.params, cfg.policy, cfg.loss, batch);
  state.opt.step(state.params.values, breakdown.grad);
  state.step += 1;

  log.mean_rollout_length = rollout_count > 0
                                ? static_cast<double>(rollout_tokens) / rollout_count
                                : 0.0;
  log.train_accuracy = rollout_count > 0 ? static_cast<double>(correct_count) / rollout_count : 0.0;
  log.pg = breakdown.pg_loss;
  log.dpo = breakdown.dpo_loss;
  log.len = breakdown.length_term;
  log.total = breakdown.total;
  log.mean_delta = breakdown.mean_delta;
  log.mean_alpha = breakdown.mean_alpha;
  log.pair_count = breakdown.pair_count;
  log.accepted_pair_count = breakdown.accepted_pair_count;
  log.acceptance_rate =
      breakdown.pair_count > 0
          ? static_cast<double>(breakdown.accepted_pair_count) / breakdown.pair_count
          : 0.0;
  if (pair_orig_tokens > 0) {
    log.retained_frac = static_cast<double>(pair_retained) / pair_orig_tokens;
    log.removed_frac = static_cast<double>(pair_removed) / pair_orig_tokens;
    log.added_frac = static_cast<double>(pair_added) / pair_orig_tokens;
  }
  log.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

EvalResult evaluate(const PolicyParams& params, const TrainConfig& cfg,
                    std::span<const Problem> problems, int step) {
  if (problems.empty()) throw std::invalid_argument("evaluate: empty problem set");
  Rng rng(mix_seed(cfg.seeds.eval, static_cast<uint64_t>(step) + 1));
  const AnswerFormat fmt = AnswerFormat::markers();

  EvalResult result;
  result.traces.reserve(problems.size());
  for (const Problem& p : problems) {
    Trajectory t = sample_trajectory(params, cfg.policy, p.prompt_tokens, cfg.eval_sampling, rng);
    TraceRecord rec;
    rec.problem = p.expression_text;
    rec.gold_answer = p.ground_truth;
    rec.response_tokens = t.response_tokens;
    result.traces.push_back(std::move(rec));
  }
  result.report = corpus_report(result.traces);
  result.accuracy = result.report.accuracy;
  result.mean_length = result.report.mean_length;
  return result;
}

// ----------------------------- checkpoint state -----------------------------

void save_trainer_state(const std::string& checkpoint_path, const TrainerState& state) {
  save_checkpoint(checkpoint_path, state.config.policy, state.params);
  std::ofstream out(checkpoint_path + ".state", std::ios::binary);
  if (!out) throw std::runtime_error("trainer state: cannot write " + checkpoint_path + ".state");
  const char magic[4] = {'C', 'L', 'S', '1'};
  out.write(magic, 4);
  const int64_t step = state.step;
  const int64_t adam_t = state.opt.t;
  const uint64_t n = state.opt.m.size();
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  out.write(reinterpret_cast<const char*>(&adam_t), sizeof(adam_t));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(state.opt.m.data()), n * sizeof(double));
  out.write(reinterpret_cast<const char*>(state.opt.v.data()), n * sizeof(double));
  const auto ds = state.data_rng.state();
  const auto ss = state.sampling_rng.state();
  out.write(reinterpret_cast<const char*>(ds.data()), sizeof(ds));
  out.write(reinterpret_cast<const char*>(ss.data()), sizeof(ss));
  if (!out) throw std::runtime_error("trainer state: write failed");
}

void load_trainer_state(const std::string& checkpoint_path, TrainerState& state) {
  auto [cfg, params] = load_checkpoint(checkpoint_path);
  if (param_count(state.config.policy) != static_cast<int>(params.values.size()))
    throw std::runtime_error("trainer state: checkpoint does not match the configured policy");
  state.params = std::move(params);

  std::ifstream in(checkpoint_path + ".state", std::ios::binary);
  if (!in) throw std::runtime_error("trainer state: cannot open " + checkpoint_path + ".state");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "CLS1")
    throw std::runtime_error("trainer state: bad state file magic");
  int64_t step = 0, adam_t = 0;
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&step), sizeof(step));
  in.read(reinterpret_cast<char*>(&adam_t), sizeof(adam_t));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n != state.opt.m.size())
    throw std::runtime_error("trainer state: optimizer size mismatch");
  in.read(reinterpret_cast<char*>(state.opt.m.data()), n * sizeof(double));
  in.read(reinterpret_cast<char*>(state.opt.v.data()), n * sizeof(double));
  std::array<uint64_t, 4> ds{}, ss{};
  in.read(reinterpret_cast<char*>(ds.data()), sizeof(ds));
  in.read(reinterpret_cast<char*>(ss.data()), sizeof(ss));
  if (!in) throw std::runtime_error("trainer state: truncated state file");
  state.step = static_cast<int>(step);
  state.opt.t = adam_t;
  state.data_rng.set_state(ds);
  state.sampling_rng.set_state(ss);
}

// ----------------------------- full run -----------------------------

RunArtifacts run_training(const TrainConfig& cfg, const std::optional<std::string>& resume_from) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  RunArtifacts artifacts;
  artifacts.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
  artifacts.train_log_path = cfg.out_dir + "/train_log.jsonl";
  artifacts.eval_log_path = cfg.out_dir + "/eval_log.jsonl";
  artifacts.final_traces_path = cfg.out_dir + "/eval_traces_final.jsonl";

  TrainerState state;
  if (resume_from) {
    TrainConfig no_warmup = cfg;  // the checkpoint supersedes the warmup result
    no_warmup.warmup_steps = 0;
    state = init_trainer(no_warmup);
    state.config = cfg;
    load_trainer_state(*resume_from, state);
  } else {
    state = init_trainer(cfg);
  }

  save_train_config(cfg.out_dir + "/config.json", cfg);
  const auto mode = resume_from ? std::ios::app : std::ios::trunc;
  std::ofstream train_log(artifacts.train_log_path, mode);
  std::ofstream eval_log(artifacts.eval_log_path, mode);
  if (!train_log || !eval_log) throw std::runtime_error("run: cannot open log files");

  auto run_eval = [&](int step) {
    EvalResult eval = evaluate(state.params, cfg, state.eval_problems, step);
    eval_log << eval_log_json(step, eval) << '\n' << std::flush;
    save_trainer_state(artifacts.checkpoint_path, state);
    artifacts.eval_history.emplace_back(step, std::move(eval));
  };

  if (!resume_from) run_eval(0);
  while (state.step < cfg.steps) {
    StepLog log = train_step(state);
    train_log << step_log_json(log) << '\n';
    if (state.step % cfg.eval_every == 0 || state.step == cfg.steps) run_eval(state.step);
  }
  train_log.flush();

  if (artifacts.eval_history.empty()) run_eval(state.step);
  const EvalResult& last = artifacts.eval_history.back().second;
  write_trace_corpus(artifacts.final_traces_path, last.traces);
  return artifacts;
}

}  // namespace clore
