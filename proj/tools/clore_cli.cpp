// Command-line surface: train / eval / augment / analyze / verify.
// Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 verification-suite failure.

#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clore/augment.hpp"
#include "clore/llm_client.hpp"
#include "clore/metrics.hpp"
#include "clore/objectives.hpp"
#include "clore/policy.hpp"
#include "clore/synth_env.hpp"
#include "clore/trainer.hpp"
#include "clore/verify.hpp"

namespace {

using clore::AnswerFormat;
using json = nlohmann::json;

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::optional<std::string>& resume) {
  clore::TrainConfig cfg = clore::load_train_config(config_path);
  for (const std::string& o : overrides) clore::apply_override(cfg, o);
  cfg.validate();
  clore::RunArtifacts artifacts = clore::run_training(cfg, resume);
  const auto& [last_step, last_eval] = artifacts.eval_history.back();
  std::cout << "run complete: " << cfg.steps << " steps\n"
            << "  final eval (step " << last_step << "): accuracy " << last_eval.accuracy
            << ", mean length " << last_eval.mean_length << "\n"
            << "  checkpoint: " << artifacts.checkpoint_path << "\n"
            << "  train log:  " << artifacts.train_log_path << "\n"
            << "  eval log:   " << artifacts.eval_log_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, int problems, int difficulty, uint64_t seed) {
  auto [policy_cfg, params] = clore::load_checkpoint(checkpoint);
  clore::TrainConfig cfg;
  cfg.policy = policy_cfg;
  cfg.difficulty = difficulty;
  cfg.eval_set_size = problems;
  cfg.seeds.eval = seed;

  clore::Rng rng(seed);
  std::vector<clore::Problem> eval_problems;
  eval_problems.reserve(problems);
  for (int i = 0; i < problems; ++i)
    eval_problems.push_back(clore::generate_problem(rng, difficulty));

  clore::EvalResult result = clore::evaluate(params, cfg, eval_problems, 0);
  std::cout << "problems:            " << problems << "\n"
            << "accuracy:            " << result.accuracy << "\n"
            << "mean length:         " << result.mean_length << "\n"
            << "rep-4 / rep-8:       " << result.report.rep_4 << " / " << result.report.rep_8
            << "\n"
            << "longest rep. span:   " << result.report.longest_repeated_span << "\n"
            << "post-answer frac:    " << result.report.post_answer_fraction << "\n";
  return 0;
}

int cmd_augment(const std::string& in_path, const std::string& out_path,
                const std::optional<std::string>& checkpoint,
                const std::optional<std::string>& endpoint_url, const std::string& model,
                const std::string& fewshot_path) {
  const auto records = clore::read_trace_corpus(in_path);
  const AnswerFormat fmt = AnswerFormat::markers();

  std::optional<clore::PolicyConfig> policy_cfg;
  std::optional<clore::PolicyParams> params;
  if (checkpoint) {
    auto loaded = clore::load_checkpoint(*checkpoint);
    policy_cfg = loaded.first;
    params = std::move(loaded.second);
  }
  const clore::ScoreFn score = [&](std::span<const int> prompt, std::span<const int> response) {
    if (params) return clore::per_token_logprobs(*params, *policy_cfg, prompt, response);
    return std::vector<double>(response.size(), 0.0);
  };
  const clore::RewardFn reward_fn = [&fmt](const clore::Problem& p, const clore::Trajectory& t) {
    return clore::reward(p, t, fmt);
  };

  std::optional<clore::EndpointConfig> endpoint;
  std::optional<clore::FewShotExample> fewshot;
  if (endpoint_url) {
    clore::EndpointConfig ep;
    ep.base_url = *endpoint_url;
    ep.model_name = model;
    if (!fewshot_path.empty()) ep.fewshot_path = fewshot_path;
    ep.validate();
    endpoint = ep;
    fewshot = clore::load_fewshot(ep.fewshot_path.empty()
                                      ? clore::default_fewshot_path(AnswerFormat::Kind::marker_pair)
                                      : ep.fewshot_path);
  }

  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot open " + out_path + " for writing");
  int edited_count = 0, skipped = 0;
  clore::AugmentConfig aug_cfg;
  for (const clore::TraceRecord& rec : records) {
    auto prompt_tokens = clore::tokenize(rec.problem);
    if (!prompt_tokens || rec.response_tokens.empty()) {
      ++skipped;
      continue;
    }
    clore::Problem problem;
    problem.expression_text = rec.problem;
    problem.ground_truth = rec.gold_answer;
    problem.prompt_tokens = *prompt_tokens;
    problem.prompt_tokens.push_back(clore::vocab::kEquals);

    clore::Trajectory traj;
    traj.prompt_tokens = problem.prompt_tokens;
    traj.response_tokens = rec.response_tokens;
    traj.reward = reward_fn(problem, traj);
    if (traj.reward != 1) {
      ++skipped;  // augmentation is restricted to correct traces
      continue;
    }

    std::vector<int> edited;
    if (endpoint) {
      clore::LlmAugmentResult r = clore::llm_augment(problem, traj, *endpoint, *fewshot);
      if (r.accepted) edited = std::move(r.tokens);
    } else {
      edited = clore::rule_based_augment(traj, aug_cfg, fmt);
    }
    clore::PreferencePair pair =
        clore::build_preference_pair(problem, traj, std::move(edited), score, reward_fn);

    json line;
    line["problem"] = rec.problem;
    line["original_tokens"] = pair.original.response_tokens;
    line["edited_tokens"] = pair.edited.response_tokens;
    line["accepted"] = pair.accepted;
    line["edit_stats"] = {{"retained", pair.edit_stats.retained},
                          {"removed", pair.edit_stats.removed},
                          {"added", pair.edit_stats.added}};
    out << line.dump() << '\n';
    ++edited_count;
  }
  std::cout << "pairs written: " << edited_count << ", skipped (incorrect or unparsable): "
            << skipped << "\n";
  return 0;
}

int cmd_analyze(const std::string& in_path, const std::optional<std::string>& baseline_path,
                const std::optional<std::string>& judge_url, const std::string& judge_model,
                const std::optional<std::string>& csv_path,
                const std::optional<std::string>& json_path) {
  const auto corpus = clore::read_trace_corpus(in_path);

  std::optional<clore::CorpusBaseline> baseline;
  if (baseline_path) {
    const auto base_corpus = clore::read_trace_corpus(*baseline_path);
    const clore::MetricsReport base_report = clore::corpus_report(base_corpus);
    baseline = clore::CorpusBaseline{base_report.accuracy, base_report.mean_length};
  }

  clore::JudgeFn judge;
  if (judge_url) {
    clore::EndpointConfig ep;
    ep.base_url = *judge_url;
    ep.model_name = judge_model;
    judge = [ep](const std::string& problem, const std::string& response) {
      const clore::ChatRequest req = clore::build_judge_prompt(problem, response);
      const clore::CompletionResult res = clore::request_completion(req, ep);
      if (!res.ok) return std::optional<double>{};
      return clore::parse_judge_score(res.text);
    };
  }

  const clore::MetricsReport report = clore::corpus_report(corpus, baseline, judge);

  std::cout << "traces:              " << report.trace_count << "\n"
            << "accuracy:            " << report.accuracy << "\n"
            << "mean length:         " << report.mean_length << "\n"
            << "rep-4:               " << report.rep_4 << "\n"
            << "rep-8:               " << report.rep_8 << "\n"
            << "longest rep. span:   " << report.longest_repeated_span << "\n"
            << "post-answer frac:    " << report.post_answer_fraction << "\n"
            << "no-answer traces:    " << report.no_answer_count << "\n";
  if (report.ae_score) std::cout << "AE score:            " << *report.ae_score << "\n";
  if (report.illegibility_pct)
    std::cout << "illegibility %:      " << *report.illegibility_pct << " (" << report.judge_failure_count
              << " judge failures)\n";

  json machine;
  machine["trace_count"] = report.trace_count;
  machine["accuracy"] = report.accuracy;
  machine["mean_length"] = report.mean_length;
  machine["rep_4"] = report.rep_4;
  machine["rep_8"] = report.rep_8;
  machine["longest_repeated_span"] = report.longest_repeated_span;
  machine["post_answer_fraction"] = report.post_answer_fraction;
  machine["no_answer_count"] = report.no_answer_count;
  if (report.ae_score) machine["ae_score"] = *report.ae_score;
  if (report.illegibility_pct) {
    machine["illegibility_pct"] = *report.illegibility_pct;
    machine["judge_failure_count"] = report.judge_failure_count;
  }
  if (json_path) {
    std::ofstream jout(*json_path);
    if (!jout) throw std::runtime_error("cannot open " + *json_path + " for writing");
    jout << machine.dump(2) << '\n';
  } else {
    std::cout << machine.dump() << "\n";
  }

  if (csv_path) {
    std::ofstream csv(*csv_path);
    if (!csv) throw std::runtime_error("cannot open " + *csv_path + " for writing");
    csv << "index,reward,length,rep_4,rep_8,longest_repeated_span,post_answer_fraction,has_answer\n";
    for (size_t i = 0; i < corpus.size(); ++i) {
      const clore::TraceMetrics m = clore::trace_metrics(corpus[i]);
      csv << i << ',' << m.reward << ',' << m.length << ',' << m.rep_4 << ',' << m.rep_8 << ','
          << m.longest_repeated_span << ',' << m.post_answer_fraction << ','
          << (m.has_answer ? 1 : 0) << '\n';
    }
  }
  return 0;
}

int cmd_verify(uint64_t seed) {
  const auto results = clore::run_verification_suites(seed);
  bool all_ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << " — " << r.detail << "\n";
    all_ok = all_ok && r.passed;
  }
  return all_ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CLORE desk-scale trainer: content-level rollout editing with a "
               "reference-free preference objective on top of policy-gradient RL"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "run the training loop from a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  std::string resume_path;
  train->add_option("--config", config_path, "JSON config file")->required();
  train->add_option("--set", overrides, "override config fields, e.g. --set loss.dpo_weight=0.2");
  train->add_option("--resume", resume_path, "resume from a checkpoint written by a prior run");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh problems");
  std::string eval_checkpoint;
  int eval_problems = 128;
  int eval_difficulty = 1;
  uint64_t eval_seed = 4;
  eval->add_option("--checkpoint", eval_checkpoint, "policy checkpoint")->required();
  eval->add_option("--problems", eval_problems, "number of evaluation problems");
  eval->add_option("--difficulty", eval_difficulty, "problem difficulty in [1,4]");
  eval->add_option("--seed", eval_seed, "evaluation seed");

  // augment
  auto* augment = app.add_subcommand("augment", "edit a trace corpus into preference pairs");
  std::string aug_in, aug_out, aug_model = "editor", aug_fewshot;
  std::string aug_checkpoint, aug_endpoint;
  augment->add_option("--in", aug_in, "input trace corpus (JSON lines)")->required();
  augment->add_option("--out", aug_out, "output pair dump (JSON lines)")->required();
  augment->add_option("--checkpoint", aug_checkpoint, "policy checkpoint for pair logprobs");
  augment->add_option("--endpoint", aug_endpoint, "external editor base URL (rule-based when absent)");
  augment->add_option("--model", aug_model, "external editor model name");
  augment->add_option("--fewshot", aug_fewshot, "one-shot example JSON file");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "content-quality report over a trace corpus");
  std::string an_in, an_baseline, an_judge, an_judge_model = "judge", an_csv, an_json;
  analyze->add_option("--in", an_in, "input trace corpus (JSON lines)")->required();
  analyze->add_option("--baseline", an_baseline, "baseline corpus for the AE score");
  analyze->add_option("--judge", an_judge, "judge endpoint base URL for illegibility scoring");
  analyze->add_option("--judge-model", an_judge_model, "judge model name");
  analyze->add_option("--csv", an_csv, "write per-trace rows to this CSV file");
  analyze->add_option("--json", an_json, "write the machine-readable report here");

  // verify
  auto* verify = app.add_subcommand("verify", "run the numeric verification suites");
  uint64_t verify_seed = 20240901;
  verify->add_option("--seed", verify_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(config_path, overrides,
                       resume_path.empty() ? std::nullopt
                                           : std::optional<std::string>(resume_path));
    }
    if (eval->parsed()) return cmd_eval(eval_checkpoint, eval_problems, eval_difficulty, eval_seed);
    if (augment->parsed()) {
      return cmd_augment(aug_in, aug_out,
                         aug_checkpoint.empty() ? std::nullopt
                                                : std::optional<std::string>(aug_checkpoint),
                         aug_endpoint.empty() ? std::nullopt
                                              : std::optional<std::string>(aug_endpoint),
                         aug_model, aug_fewshot);
    }
    if (analyze->parsed()) {
      return cmd_analyze(an_in,
                         an_baseline.empty() ? std::nullopt
                                             : std::optional<std::string>(an_baseline),
                         an_judge.empty() ? std::nullopt : std::optional<std::string>(an_judge),
                         an_judge_model,
                         an_csv.empty() ? std::nullopt : std::optional<std::string>(an_csv),
                         an_json.empty() ? std::nullopt : std::optional<std::string>(an_json));
    }
    if (verify->parsed()) return cmd_verify(verify_seed);
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
