#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clore/augment.hpp"
#include "clore/policy.hpp"
#include "clore/synth_env.hpp"

namespace clore {

struct EndpointConfig {
  std::string base_url;  // e.g. http://127.0.0.1:8080
  std::string model_name = "editor";
  std::string api_key_env = "CLORE_API_KEY";  // resolved at request time, never logged
  double timeout_seconds = 30.0;
  int max_retries = 3;
  double backoff_base_seconds = 0.5;
  int max_concurrent = 4;
  int max_token_slack = 64;  // added to the rollout length for max_tokens
  std::string fewshot_path;  // empty: resolved from the answer format

  void validate() const;
};

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 0.7;
  double top_p = 0.9;
  int max_tokens = 256;
};

// One-shot (question, original, augmented) triple plus the answer-format
// instruction, kept in a data file so format variants are a config switch.
struct FewShotExample {
  std::string instruction;
  std::string question;
  std::string original;
  std::string augmented;
};

FewShotExample load_fewshot(const std::string& path);
std::string default_fewshot_path(AnswerFormat::Kind kind);

// Editor prompt: the fixed filter system instruction, then one completed
// example, then the target rollout, ending with "augmented reasoning:".
// Sampling is temperature 0.7, top-p 0.9; max_tokens is the rollout's
// whitespace token count plus the configured slack.
ChatRequest build_augment_prompt(const std::string& problem_text, const std::string& rollout_text,
                                 const FewShotExample& fewshot, int max_token_slack = 64);

enum class ClientErrorKind { none, timeout, http_status, malformed_body, retries_exhausted };

struct Attempt {
  int status = 0;  // 0: transport-level failure
  double delay_seconds = 0.0;  // backoff slept before the NEXT attempt
};

struct CompletionResult {
  bool ok = false;
  std::string text;
  ClientErrorKind error = ClientErrorKind::none;
  std::string error_message;
  std::vector<Attempt> attempts;
};

// POSTs a chat-completion JSON body to {base_url}/v1/chat/completions and
// returns the first choice's message content. Retries 429/5xx and transport
// failures with delays backoff_base * 2^k; other statuses and malformed
// bodies fail immediately.
CompletionResult request_completion(const ChatRequest& req, const EndpointConfig& cfg);

struct LlmAugmentResult {
  bool accepted = false;
  std::vector<int> tokens;  // valid when accepted
  std::string rejection_cause;
};

// Asks the external editor for a deletion-only rewrite of a correct rollout
// and accepts the reply only when it re-tokenizes to a subsequence of the
// original response.
LlmAugmentResult llm_augment(const Problem& problem, const Trajectory& traj,
                             const EndpointConfig& cfg, const FewShotExample& fewshot);

// Batched variant; results line up with the inputs. At most
// cfg.max_concurrent requests are in flight at once.
std::vector<LlmAugmentResult> llm_augment_batch(const std::vector<const Problem*>& problems,
                                                const std::vector<const Trajectory*>& trajs,
                                                const EndpointConfig& cfg,
                                                const FewShotExample& fewshot);

// Legibility judge prompt; the reply must be a single number in [0, 100].
ChatRequest build_judge_prompt(const std::string& problem, const std::string& response);

// First decimal number in the reply; nullopt when absent or out of range.
std::optional<double> parse_judge_score(const std::string& text);

}  // namespace clore
