#include "clore/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace clore {

namespace {

constexpr int kPadToken = 0;

// Fills `context` with the last K tokens of prompt+response[0..t), left-padded.
void build_context(std::span<const int> prompt, std::span<const int> response, int t, int window,
                   std::span<int> context) {
  const int total = static_cast<int>(prompt.size()) + t;
  for (int k = 0; k < window; ++k) {
    const int pos = total - window + k;
    if (pos < 0) {
      context[k] = kPadToken;
    } else if (pos < static_cast<int>(prompt.size())) {
      context[k] = prompt[pos];
    } else {
      context[k] = response[pos - prompt.size()];
    }
  }
}

// Forward pass scratch for one step.
struct StepForward {
  std::vector<double> input;    // K * embed_dim
  std::vector<double> hidden;   // tanh activations
  std::vector<double> softmax;  // softmax(logits / temperature)
  std::vector<double> probs;    // smoothed mixture
};

void forward_step(const PolicyParams& params, const PolicyConfig& cfg, const ParamLayout& lay,
                  std::span<const int> context, StepForward& fwd) {
  const int ke = cfg.context_window * cfg.embed_dim;
  fwd.input.resize(ke);
  fwd.hidden.resize(cfg.hidden_dim);
  fwd.softmax.resize(cfg.vocab_size);
  fwd.probs.resize(cfg.vocab_size);

  const double* v = params.values.data();
  for (int k = 0; k < cfg.context_window; ++k) {
    const double* row = v + lay.embeddings + context[k] * cfg.embed_dim;
    std::copy(row, row + cfg.embed_dim, fwd.input.begin() + k * cfg.embed_dim);
  }
  for (int h = 0; h < cfg.hidden_dim; ++h) {
    const double* row = v + lay.w1 + h * ke;
    double acc = v[lay.b1 + h];
    for (int i = 0; i < ke; ++i) acc += row[i] * fwd.input[i];
    fwd.hidden[h] = std::tanh(acc);
  }
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int o = 0; o < cfg.vocab_size; ++o) {
    const double* row = v + lay.w2 + o * cfg.hidden_dim;
    double acc = v[lay.b2 + o];
    for (int h = 0; h < cfg.hidden_dim; ++h) acc += row[h] * fwd.hidden[h];
    if (!std::isfinite(acc)) throw std::runtime_error("policy: non-finite logit (corrupted parameters)");
    fwd.softmax[o] = acc / cfg.temperature;
    max_logit = std::max(max_logit, fwd.softmax[o]);
  }
  double z = 0.0;
  for (int o = 0; o < cfg.vocab_size; ++o) {
    fwd.softmax[o] = std::exp(fwd.softmax[o] - max_logit);
    z += fwd.softmax[o];
  }
  const double floor = cfg.smoothing / cfg.vocab_size;
  for (int o = 0; o < cfg.vocab_size; ++o) {
    fwd.softmax[o] /= z;
    fwd.probs[o] = (1.0 - cfg.smoothing) * fwd.softmax[o] + floor;
  }
}

// Backprop one step's d log p[target] into grad (+= weight * gradient).
void backward_step(const PolicyParams& params, const PolicyConfig& cfg, const ParamLayout& lay,
                   std::span<const int> context, const StepForward& fwd, int target, double weight,
                   std::span<double> grad) {
  const int ke = cfg.context_window * cfg.embed_dim;
  const double* v = params.values.data();

  // d log p[y] / d logit_j = (1-eps) * s[y] * (delta_yj - s[j]) / (temp * p[y])
  const double scale = (1.0 - cfg.smoothing) * fwd.softmax[target] /
                       (cfg.temperature * fwd.probs[target]);
  thread_local std::vector<double> dlogits, dhidden, dinput;
  dlogits.assign(cfg.vocab_size, 0.0);
  for (int j = 0; j < cfg.vocab_size; ++j) dlogits[j] = -scale * fwd.softmax[j];
  dlogits[target] += scale;

  dhidden.assign(cfg.hidden_dim, 0.0);
  for (int o = 0; o < cfg.vocab_size; ++o) {
    const double g = dlogits[o];
    if (g == 0.0) continue;
    const double wg = weight * g;
    double* w2row = grad.data() + lay.w2 + o * cfg.hidden_dim;
    const double* w2 = v + lay.w2 + o * cfg.hidden_dim;
    for (int h = 0; h < cfg.hidden_dim; ++h) {
      w2row[h] += wg * fwd.hidden[h];
      dhidden[h] += g * w2[h];
    }
    grad[lay.b2 + o] += wg;
  }

  dinput.assign(ke, 0.0);
  for (int h = 0; h < cfg.hidden_dim; ++h) {
    const double da = dhidden[h] * (1.0 - fwd.hidden[h] * fwd.hidden[h]);
    if (da == 0.0) continue;
    const double wda = weight * da;
    double* w1row = grad.data() + lay.w1 + h * ke;
    const double* w1 = v + lay.w1 + h * ke;
    for (int i = 0; i < ke; ++i) {
      w1row[i] += wda * fwd.input[i];
      dinput[i] += da * w1[i];
    }
    grad[lay.b1 + h] += wda;
  }

  for (int k = 0; k < cfg.context_window; ++k) {
    double* erow = grad.data() + lay.embeddings + context[k] * cfg.embed_dim;
    const double* din = dinput.data() + k * cfg.embed_dim;
    for (int e = 0; e < cfg.embed_dim; ++e) erow[e] += weight * din[e];
  }
}

}  // namespace

void PolicyConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("policy config: vocab_size must be >= 2");
  if (context_window < 1 || embed_dim < 1 || hidden_dim < 1)
    throw std::invalid_argument("policy config: all dims must be >= 1");
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw std::invalid_argument("policy config: smoothing must be in [0, 1)");
  if (!(temperature > 0.0)) throw std::invalid_argument("policy config: temperature must be > 0");
}

ParamLayout param_layout(const PolicyConfig& cfg) {
  ParamLayout lay;
  const int ke = cfg.context_window * cfg.embed_dim;
  lay.embeddings = 0;
  lay.w1 = lay.embeddings + cfg.vocab_size * cfg.embed_dim;
  lay.b1 = lay.w1 + cfg.hidden_dim * ke;
  lay.w2 = lay.b1 + cfg.hidden_dim;
  lay.b2 = lay.w2 + cfg.vocab_size * cfg.hidden_dim;
  lay.total = lay.b2 + cfg.vocab_size;
  return lay;
}

int param_count(const PolicyConfig& cfg) { return param_layout(cfg).total; }

PolicyParams init_params(const PolicyConfig& cfg, uint64_t seed) {
  cfg.validate();
  const ParamLayout lay = param_layout(cfg);
  PolicyParams params;
  params.values.assign(lay.total, 0.0);
  Rng rng(seed);

  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  for (int i = lay.embeddings; i < lay.w1; ++i) params.values[i] = rng.next_signed_unit() * emb_scale;
  const double w1_scale = 1.0 / std::sqrt(static_cast<double>(cfg.context_window * cfg.embed_dim));
  for (int i = lay.w1; i < lay.b1; ++i) params.values[i] = rng.next_signed_unit() * w1_scale;
  const double w2_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  for (int i = lay.w2; i < lay.b2; ++i) params.values[i] = rng.next_signed_unit() * w2_scale;
  return params;
}

void next_token_distribution(const PolicyParams& params, const PolicyConfig& cfg,
                             std::span<const int> context, std::span<double> probs_out) {
  if (static_cast<int>(context.size()) != cfg.context_window)
    throw std::invalid_argument("policy: context must hold exactly K tokens");
  const ParamLayout lay = param_layout(cfg);
  StepForward fwd;
  forward_step(params, cfg, lay, context, fwd);
  std::copy(fwd.probs.begin(), fwd.probs.end(), probs_out.begin());
}

double sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                        std::span<const int> prompt, std::span<const int> response) {
  if (response.empty()) throw std::invalid_argument("policy: empty response");
  const ParamLayout lay = param_layout(cfg);
  std::vector<int> context(cfg.context_window);
  StepForward fwd;
  double total = 0.0;
  for (int t = 0; t < static_cast<int>(response.size()); ++t) {
    build_context(prompt, response, t, cfg.context_window, context);
    forward_step(params, cfg, lay, context, fwd);
    total += std::log(fwd.probs[response[t]]);
  }
  return total;
}

std::vector<double> per_token_logprobs(const PolicyParams& params, const PolicyConfig& cfg,
                                       std::span<const int> prompt, std::span<const int> response) {
  if (response.empty()) throw std::invalid_argument("policy: empty response");
  const ParamLayout lay = param_layout(cfg);
  std::vector<int> context(cfg.context_window);
  StepForward fwd;
  std::vector<double> out(response.size());
  for (int t = 0; t < static_cast<int>(response.size()); ++t) {
    build_context(prompt, response, t, cfg.context_window, context);
    forward_step(params, cfg, lay, context, fwd);
    out[t] = std::log(fwd.probs[response[t]]);
  }
  return out;
}

double accumulate_grad_sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                                        std::span<const int> prompt, std::span<const int> response,
                                        double weight, std::span<double> grad_inout) {
  if (response.empty()) throw std::invalid_argument("policy: empty response");
  const ParamLayout lay = param_layout(cfg);
  std::vector<int> context(cfg.context_window);
  StepForward fwd;
  double total = 0.0;
  for (int t = 0; t < static_cast<int>(response.size()); ++t) {
    build_context(prompt, response, t, cfg.context_window, context);
    forward_step(params, cfg, lay, context, fwd);
    total += std::log(fwd.probs[response[t]]);
    backward_step(params, cfg, lay, context, fwd, response[t], weight, grad_inout);
  }
  return total;
}

std::vector<double> grad_sequence_logprob(const PolicyParams& params, const PolicyConfig& cfg,
                                          std::span<const int> prompt,
                                          std::span<const int> response) {
  std::vector<double> grad(param_count(cfg), 0.0);
  accumulate_grad_sequence_logprob(params, cfg, prompt, response, 1.0, grad);
  return grad;
}

Trajectory sample_trajectory(const PolicyParams& params, const PolicyConfig& cfg,
                             std::span<const int> prompt, const SamplingConfig& sampling,
                             Rng& rng) {
  if (sampling.max_len < 1) throw std::invalid_argument("sampling: max_len must be >= 1");
  const ParamLayout lay = param_layout(cfg);

  // Sampling distribution: same smoothed mixture but at the sampling
  // temperature; the recorded logprob is from the training distribution.
  PolicyConfig sample_cfg = cfg;
  if (!sampling.greedy) sample_cfg.temperature = cfg.temperature * sampling.temperature;

  Trajectory traj;
  traj.prompt_tokens.assign(prompt.begin(), prompt.end());

  std::vector<int> context(cfg.context_window);
  StepForward fwd, train_fwd;
  std::vector<int> order(cfg.vocab_size);

  for (int t = 0; t < sampling.max_len; ++t) {
    build_context(prompt, traj.response_tokens, t, cfg.context_window, context);
    forward_step(params, sample_cfg, lay, context, fwd);

    int token;
    if (sampling.greedy) {
      token = 0;
      for (int o = 1; o < cfg.vocab_size; ++o)
        if (fwd.probs[o] > fwd.probs[token]) token = o;
    } else {
      // Nucleus cut: descending probability, ties by ascending id, shortest
      // prefix with mass >= top_p, renormalized.
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (fwd.probs[a] != fwd.probs[b]) return fwd.probs[a] > fwd.probs[b];
        return a < b;
      });
      double mass = 0.0;
      int keep = cfg.vocab_size;
      for (int i = 0; i < cfg.vocab_size; ++i) {
        mass += fwd.probs[order[i]];
        if (mass >= sampling.top_p) {
          keep = i + 1;
          break;
        }
      }
      const double u = rng.next_double() * mass;
      double acc = 0.0;
      token = order[keep - 1];
      for (int i = 0; i < keep; ++i) {
        acc += fwd.probs[order[i]];
        if (u < acc) {
          token = order[i];
          break;
        }
      }
    }

    forward_step(params, cfg, lay, context, train_fwd);
    traj.response_tokens.push_back(token);
    traj.token_logprobs.push_back(std::log(train_fwd.probs[token]));
    if (token == sampling.stop_token) return traj;
  }
  traj.hit_max_len = true;
  return traj;
}

void save_checkpoint(const std::string& path, const PolicyConfig& cfg, const PolicyParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  const unsigned char version = 0x01;
  out.write(reinterpret_cast<const char*>(&version), 1);
  const int32_t dims[4] = {cfg.vocab_size, cfg.context_window, cfg.embed_dim, cfg.hidden_dim};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(&cfg.smoothing), sizeof(double));
  out.write(reinterpret_cast<const char*>(&cfg.temperature), sizeof(double));
  const int64_t count = static_cast<int64_t>(params.values.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::pair<PolicyConfig, PolicyParams> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  unsigned char version = 0;
  in.read(reinterpret_cast<char*>(&version), 1);
  if (!in || version != 0x01)
    throw std::runtime_error("checkpoint: unsupported format version in " + path);
  PolicyConfig cfg;
  int32_t dims[4];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  cfg.vocab_size = dims[0];
  cfg.context_window = dims[1];
  cfg.embed_dim = dims[2];
  cfg.hidden_dim = dims[3];
  in.read(reinterpret_cast<char*>(&cfg.smoothing), sizeof(double));
  in.read(reinterpret_cast<char*>(&cfg.temperature), sizeof(double));
  int64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  cfg.validate();
  if (count != param_count(cfg))
    throw std::runtime_error("checkpoint: parameter count does not match config in " + path);
  PolicyParams params;
  params.values.resize(static_cast<size_t>(count));
  in.read(reinterpret_cast<char*>(params.values.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated parameters in " + path);
  return {cfg, params};
}

}  // namespace clore
