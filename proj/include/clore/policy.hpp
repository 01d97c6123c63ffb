#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clore/rng.hpp"

namespace clore {

// Tiny autoregressive token policy: embed the last K tokens, concatenate,
// affine -> tanh -> affine -> logits. The next-token distribution is the
// smoothed mixture
//
//   p = (1 - smoothing) * softmax(logits / temperature) + smoothing / vocab_size
//
// so every conditional probability is bounded below by
// p_min = smoothing / vocab_size whenever smoothing > 0. Token id 0 is the
// reserved pad token used to left-pad short contexts.
struct PolicyConfig {
  int vocab_size = 0;
  int context_window = 0;  // K
  int embed_dim = 0;
  int hidden_dim = 0;
  double smoothing = 0.0;  // epsilon in [0, 1)
  double temperature = 1.0;

  double p_min() const { return smoothing / vocab_size; }
  void validate() const;  // throws std::invalid_argument on a bad config
};

// Flat parameter vector. Layout, in order, all row-major:
//   embeddings  [vocab_size x embed_dim]
//   W1          [hidden_dim x (K * embed_dim)]
//   b1          [hidden_dim]
//   W2          [vocab_size x hidden_dim]
//   b2          [vocab_size]
struct PolicyParams {
  std::vector<double> values;
};

int param_count(const PolicyConfig& cfg);

// Offsets of each block inside PolicyParams::values.
struct ParamLayout {
  int embeddings = 0;
  int w1 = 0;
  int b1 = 0;
  int w2 = 0;
  int b2 = 0;
  int total = 0;
};
ParamLayout param_layout(const PolicyConfig& cfg);

// Deterministic init: each block is filled in layout order with
// next_signed_unit() / sqrt(fan_in), where fan_in is embed_dim for the
// embeddings, K * embed_dim for W1, and hidden_dim for W2; biases are zero.
PolicyParams init_params(const PolicyConfig& cfg, uint64_t seed);

// One sampled rollout. token_logprobs are under the smoothed training
// distribution (config temperature, no nucleus truncation), so their sum
// always equals sequence_logprob of the same tokens.
struct Trajectory {
  std::vector<int> prompt_tokens;
  std::vector<int> response_tokens;
  std::vector<double> token_logprobs;
  int reward = 0;
  // Half-open content span (start, end) into response_tokens; for the
  // marker format the close marker sits at index `end`.
  std::optional<std::pair<int, int>> answer_span;
  bool hit_max_len = false;
};

// context must hold exactly K token ids (already padded). probs_out must
// hold vocab_size entries. Throws std::runtime_error on non-finite logits.
void next_token_distribution(const PolicyParams& params, const PolicyConfig& cfg,
                             std::span<const int> context, std::span<double> probs_out);

// Sum over response steps of log p(token | prompt, previous response tokens).
double sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                        std::span<const int> prompt, std::span<const int> response);

// Per-step log conditionals; sums to sequence_logprob bit for bit.
std::vector<double> per_token_logprobs(const PolicyParams& params, const PolicyConfig& cfg,
                                       std::span<const int> prompt, std::span<const int> response);

// Analytic gradient of sequence_logprob, same shape as params.
std::vector<double> grad_sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                                          std::span<const int> prompt,
                                          std::span<const int> response);

// grad_inout += weight * d(sequence_logprob)/d(params). Returns the logprob.
double accumulate_grad_sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                                        std::span<const int> prompt, std::span<const int> response,
                                        double weight, std::span<double> grad_inout);

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_len = 32;
  int stop_token = -1;  // -1: no stop token
  bool greedy = false;  // temperature -> 0 limit: argmax, ties to lowest id
};

// Draws tokens from the smoothed distribution at the sampling temperature
// with top-p truncation (sort descending, ties by ascending token id, keep
// the shortest prefix whose mass reaches top_p, renormalize). Stops after
// emitting stop_token or reaching max_len. Recorded logprobs come from the
// untruncated training distribution at the config temperature.
Trajectory sample_trajectory(const PolicyParams& params, const PolicyConfig& cfg,
                             std::span<const int> prompt, const SamplingConfig& sampling,
                             Rng& rng);

// Checkpoint record: format-version byte 0x01, then the PolicyConfig fields
// (vocab_size, context_window, embed_dim, hidden_dim as little-endian int32;
// smoothing, temperature as float64), then an int64 parameter count, then
// the parameters in layout order. Throws std::runtime_error on IO failure
// or a version/count mismatch.
void save_checkpoint(const std::string& path, const PolicyConfig& cfg, const PolicyParams& params);
std::pair<PolicyConfig, PolicyParams> load_checkpoint(const std::string& path);

}  // namespace clore
