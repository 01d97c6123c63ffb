#include "clore/llm_client.hpp"

#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace clore {

using json = nlohmann::json;

namespace {

constexpr const char* kFilterSystemInstruction =
    "You are a strict reasoning filter. Only delete spans from the original reasoning. "
    "Do not paraphrase, rewrite, reorder, or add anything. The output must be a subsequence "
    "of the input, keeping most of the original reasoning.";

constexpr const char* kJudgePromptTemplate =
    "You are evaluating the legibility of a model-generated reasoning trace for a "
    "mathematical problem.\n\n"
    "Given the problem and the model response, estimate what percentage of the model "
    "response consists of illegible or task-irrelevant reasoning content.\n\n"
    "Illegible or task-irrelevant reasoning includes:\n"
    "- semantically meaningless or corrupted text;\n"
    "- irrelevant digressions unrelated to solving the problem;\n"
    "- unexplained or nonsensical symbol manipulation;\n"
    "- garbled multilingual text or non-natural-language spans that do not contribute to "
    "the solution;\n"
    "- reasoning steps that are impossible to interpret as part of the problem-solving "
    "process.\n\n"
    "Do not judge whether the final answer is correct. A response can have an incorrect "
    "final answer but still be legible. A response can also have a correct final answer "
    "but contain illegible reasoning.\n\n"
    "Estimate the percentage of the response that is illegible or task-irrelevant. Return "
    "only a single number between 0 and 100. Do not include any explanation.\n\n"
    "Problem:\n{problem}\n\n"
    "Model response:\n{response}\n\n"
    "Illegible percentage:";

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace

void EndpointConfig::validate() const {
  if (base_url.empty()) throw std::invalid_argument("endpoint config: base_url required");
  if (max_retries < 0) throw std::invalid_argument("endpoint config: max_retries must be >= 0");
  if (max_concurrent < 1)
    throw std::invalid_argument("endpoint config: max_concurrent must be >= 1");
  if (!(timeout_seconds > 0.0))
    throw std::invalid_argument("endpoint config: timeout must be > 0");
  if (backoff_base_seconds < 0.0)
    throw std::invalid_argument("endpoint config: backoff base must be >= 0");
}

FewShotExample load_fewshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("fewshot: cannot open " + path);
  json j = json::parse(in);
  FewShotExample ex;
  ex.instruction = j.at("instruction").get<std::string>();
  ex.question = j.at("question").get<std::string>();
  ex.original = j.at("original").get<std::string>();
  ex.augmented = j.at("augmented").get<std::string>();
  return ex;
}

std::string default_fewshot_path(AnswerFormat::Kind kind) {
  const char* name = kind == AnswerFormat::Kind::boxed ? "augment_fewshot_boxed.json"
                                                       : "augment_fewshot_markers.json";
  return std::string(CLORE_DATA_DIR) + "/" + name;
}

ChatRequest build_augment_prompt(const std::string& problem_text, const std::string& rollout_text,
                                 const FewShotExample& fewshot, int max_token_slack) {
  if (rollout_text.empty()) throw std::invalid_argument("augment prompt: empty rollout");
  ChatRequest req;
  req.system = kFilterSystemInstruction;

  std::string user = fewshot.instruction;
  user += "\n\nQuestion:\n" + fewshot.question;
  user += "\n\nReasoning to augment:\n" + fewshot.original;
  user += "\n\naugmented reasoning:\n" + fewshot.augmented;
  user += "\n\nQuestion:\n" + problem_text;
  user += "\n\nReasoning to augment:\n" + rollout_text;
  user += "\n\naugmented reasoning:";
  req.user = std::move(user);

  req.temperature = 0.7;
  req.top_p = 0.9;
  req.max_tokens =
      static_cast<int>(whitespace_tokenize(rollout_text).size()) + max_token_slack;
  return req;
}

CompletionResult request_completion(const ChatRequest& req, const EndpointConfig& cfg) {
  cfg.validate();
  if (req.system.empty() || req.user.empty())
    throw std::invalid_argument("chat request: system and user messages must be non-empty");

  json body;
  body["model"] = cfg.model_name;
  body["messages"] = json::array({{{"role", "system"}, {"content", req.system}},
                                  {{"role", "user"}, {"content", req.user}}});
  body["temperature"] = req.temperature;
  body["top_p"] = req.top_p;
  body["max_tokens"] = req.max_tokens;
  const std::string payload = body.dump();

  httplib::Client client(cfg.base_url);
  const auto timeout = std::chrono::duration<double>(cfg.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::milliseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::milliseconds>(timeout));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::milliseconds>(timeout));

  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  CompletionResult result;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    auto res = client.Post("/v1/chat/completions", headers, payload, "application/json");
    Attempt& rec = result.attempts.emplace_back();

    if (res && res->status == 200) {
      rec.status = 200;
      try {
        json reply = json::parse(res->body);
        result.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
        result.ok = true;
        return result;
      } catch (const json::exception& e) {
        result.error = ClientErrorKind::malformed_body;
        result.error_message = std::string("malformed completion body: ") + e.what();
        return result;
      }
    }

    bool retryable;
    if (!res) {
      rec.status = 0;  // transport failure or timeout
      retryable = true;
      result.error = ClientErrorKind::timeout;
      result.error_message = "transport error: " + httplib::to_string(res.error());
    } else {
      rec.status = res->status;
      retryable = res->status == 429 || res->status >= 500;
      result.error = ClientErrorKind::http_status;
      result.error_message = "http status " + std::to_string(res->status);
    }
    if (!retryable) return result;
    if (attempt == cfg.max_retries) {
      result.error = ClientErrorKind::retries_exhausted;
      result.error_message = "retries exhausted; last: " + result.error_message;
      return result;
    }
    const double delay = cfg.backoff_base_seconds * std::pow(2.0, attempt);
    rec.delay_seconds = delay;
    std::this_thread::sleep_for(std::chrono::duration<double>(delay));
  }
  return result;  // unreachable
}

LlmAugmentResult llm_augment(const Problem& problem, const Trajectory& traj,
                             const EndpointConfig& cfg, const FewShotExample& fewshot) {
  if (traj.reward != 1) throw std::invalid_argument("llm_augment: only correct rollouts are edited");

  LlmAugmentResult out;
  const std::string rollout_text = detokenize(traj.response_tokens);
  const ChatRequest req =
      build_augment_prompt(problem.expression_text, rollout_text, fewshot, cfg.max_token_slack);
  const CompletionResult completion = request_completion(req, cfg);
  if (!completion.ok) {
    out.rejection_cause = "transport: " + completion.error_message;
    return out;
  }

  auto tokens = tokenize(completion.text);
  if (!tokens) {
    out.rejection_cause = "reply does not tokenize in the synthetic vocabulary";
    return out;
  }
  if (tokens->empty()) {
    out.rejection_cause = "empty reply";
    return out;
  }
  if (!is_subsequence(traj.response_tokens, *tokens)) {
    out.rejection_cause = "reply is not a subsequence of the original";
    return out;
  }
  out.accepted = true;
  out.tokens = std::move(*tokens);
  return out;
}

std::vector<LlmAugmentResult> llm_augment_batch(const std::vector<const Problem*>& problems,
                                                const std::vector<const Trajectory*>& trajs,
                                                const EndpointConfig& cfg,
                                                const FewShotExample& fewshot) {
  if (problems.size() != trajs.size())
    throw std::invalid_argument("llm_augment_batch: size mismatch");
  std::vector<LlmAugmentResult> results(problems.size());
  if (problems.empty()) return results;

  const int workers = std::min<int>(cfg.max_concurrent, static_cast<int>(problems.size()));
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= problems.size()) return;
        try {
          results[i] = llm_augment(*problems[i], *trajs[i], cfg, fewshot);
        } catch (const std::exception& e) {
          results[i].accepted = false;
          results[i].rejection_cause = e.what();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

ChatRequest build_judge_prompt(const std::string& problem, const std::string& response) {
  ChatRequest req;
  req.system = "You are a careful evaluator of reasoning traces.";
  std::string user = kJudgePromptTemplate;
  replace_all(user, "{problem}", problem);
  replace_all(user, "{response}", response);
  req.user = std::move(user);
  req.temperature = 0.0;
  req.top_p = 1.0;
  req.max_tokens = 16;
  return req;
}

std::optional<double> parse_judge_score(const std::string& text) {
  const size_t n = text.size();
  for (size_t i = 0; i < n; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) continue;
    size_t start = i;
    if (start > 0 && (text[start - 1] == '-' || text[start - 1] == '+')) --start;
    size_t end = i;
    bool seen_dot = false;
    while (end < n && (std::isdigit(static_cast<unsigned char>(text[end])) ||
                       (text[end] == '.' && !seen_dot))) {
      if (text[end] == '.') seen_dot = true;
      ++end;
    }
    const double value = std::strtod(text.substr(start, end - start).c_str(), nullptr);
    if (value < 0.0 || value > 100.0) return std::nullopt;
    return value;
  }
  return std::nullopt;
}

}  // namespace clore
