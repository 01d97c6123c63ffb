#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clore/augment.hpp"
#include "clore/llm_client.hpp"
#include "clore/metrics.hpp"
#include "clore/objectives.hpp"
#include "clore/policy.hpp"
#include "clore/synth_env.hpp"

namespace clore {

enum class AugmenterKind { rule_based, external_llm, off };

struct SeedConfig {
  uint64_t data = 1;
  uint64_t policy = 2;
  uint64_t sampling = 3;
  uint64_t eval = 4;  // held out from the training seeds
};

struct TrainConfig {
  PolicyConfig policy{25, 16, 8, 24, 0.1, 1.0};
  LossConfig loss;
  AugmentConfig augment;
  AugmenterKind augmenter_kind = AugmenterKind::rule_based;
  std::optional<EndpointConfig> endpoint;
  int group_size = 8;  // N rollouts per prompt
  int prompts_per_step = 8;
  int steps = 500;
  int difficulty = 1;
  // Supervised warmup on verbose synthetic demonstrations before RL; the
  // desk-scale stand-in for starting from a pretrained reasoning model.
  int warmup_steps = 300;
  int warmup_batch = 32;
  double warmup_lr = 0.01;
  double learning_rate = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int eval_every = 50;
  int eval_set_size = 128;
  SeedConfig seeds;
  SamplingConfig train_sampling{1.0, 1.0, 40, vocab::kStop, false};
  SamplingConfig eval_sampling{1.0, 0.7, 40, vocab::kStop, false};
  std::string out_dir = "runs/default";

  void validate() const;
};

TrainConfig load_train_config(const std::string& path);
void save_train_config(const std::string& path, const TrainConfig& cfg);
// Applies one "dotted.path=value" override onto the config's JSON form.
void apply_override(TrainConfig& cfg, const std::string& assignment);

// Adaptive moment estimation with bias correction.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  std::vector<double> m, v;

  void init(int n);
  void step(std::vector<double>& params, const std::vector<double>& grad);
};

struct StepLog {
  int step = 0;
  double mean_rollout_length = 0.0;
  double train_accuracy = 0.0;
  double pg = 0.0, dpo = 0.0, len = 0.0, total = 0.0;
  double mean_delta = 0.0, mean_alpha = 0.0;
  int pair_count = 0;
  int accepted_pair_count = 0;
  double acceptance_rate = 0.0;
  // Fractions over original tokens: retained + removed = 1; added reported
  // separately (over original tokens as well).
  double retained_frac = 0.0, removed_frac = 0.0, added_frac = 0.0;
  int llm_fallback_count = 0;
  double wall_time_seconds = 0.0;  // not part of the canonical log line
};

// Canonical JSON-lines form; contains only run-deterministic fields so two
// identically seeded runs write identical files.
std::string step_log_json(const StepLog& log);

struct EvalResult {
  double accuracy = 0.0;
  double mean_length = 0.0;
  MetricsReport report;
  std::vector<TraceRecord> traces;
};

std::string eval_log_json(int step, const EvalResult& eval);

struct TrainerState {
  TrainConfig config;
  PolicyParams params;
  Adam opt;
  Rng data_rng{0};
  Rng sampling_rng{0};
  int step = 0;
  std::vector<Problem> eval_problems;
  std::optional<FewShotExample> fewshot;  // loaded for the external augmenter
};

// Verbose correct demonstration in the base-model style: the computation
// block, sometimes repeated, noise bursts, the answer span, post-answer
// exploration, and a stop token.
Trajectory make_demo_trajectory(Rng& rng, const Problem& problem);

TrainerState init_trainer(const TrainConfig& cfg);

// One optimization step: sample N rollouts per prompt, score them, augment
// the correct ones, consistency-filter the pairs, take one Adam step on the
// joint objective. Deterministic given seeds when the augmenter is
// rule_based; external-augmenter transport failures degrade to the
// rule-based editor for the affected rollouts.
StepLog train_step(TrainerState& state);

// One rollout per problem under the evaluation sampling settings,
// deterministic for a fixed eval seed and step.
EvalResult evaluate(const PolicyParams& params, const TrainConfig& cfg,
                    std::span<const Problem> problems, int step);

// Trainer checkpoint = policy checkpoint plus a sidecar state file
// (optimizer moments, step counter, generator states) so a resumed run
// replays the remaining steps exactly.
void save_trainer_state(const std::string& checkpoint_path, const TrainerState& state);
void load_trainer_state(const std::string& checkpoint_path, TrainerState& state);

struct RunArtifacts {
  std::string checkpoint_path;
  std::string train_log_path;
  std::string eval_log_path;
  std::string final_traces_path;
  std::vector<std::pair<int, EvalResult>> eval_history;
};

// Full loop: initial eval, `steps` training steps with an eval and a
// checkpoint every eval_every steps, JSON-lines logs, final trace dump.
// When resume_from is set, picks up after the checkpointed step.
RunArtifacts run_training(const TrainConfig& cfg,
                          const std::optional<std::string>& resume_from = std::nullopt);

}  // namespace clore
