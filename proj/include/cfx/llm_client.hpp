#pragma once

// Chat-completions client for an OpenAI-compatible endpoint (plain HTTP), and an offline mock
// that answers from the ground truth carried in a prompt bundle.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "cfx/metrics.hpp"
#include "cfx/verbalizer.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's product kernels.
#include <httplib.h>

namespace cfx {

struct LlmConfig {
  double temperature = 0.1;
  double top_p = 0.8;
  int top_k = 30;
  double repetition_penalty = 1.05;
  int max_output_tokens = 2048;
  std::string model_name = "Qwen2.5-14B-Instruct";
  std::string endpoint_url;
  double timeout_seconds = 120.0;
  int max_retries = 3;  // retries after the first attempt
  int max_in_flight = 4;
  int backoff_initial_ms = 500;
  int backoff_max_ms = 8000;
  std::string api_key_env = "CFX_LLM_API_KEY";
};

struct LlmResponse {
  std::string raw_text;
  double latency_ms = 0.0;
  std::string model_name_echoed;
  int attempt_count = 0;
  std::string request_body;
  std::string response_body;
};

enum class LlmErrorKind { config, endpoint, request, empty_response, timeout };

inline std::string to_string(LlmErrorKind k) {
  switch (k) {
    case LlmErrorKind::config: return "config";
    case LlmErrorKind::endpoint: return "endpoint";
    case LlmErrorKind::request: return "request";
    case LlmErrorKind::empty_response: return "empty_response";
    case LlmErrorKind::timeout: return "timeout";
  }
  return "unknown";
}

class LlmError : public std::runtime_error {
 public:
  LlmError(LlmErrorKind kind, const std::string& what, int attempts = 0)
      : std::runtime_error(what), kind_(kind), attempts_(attempts) {}
  LlmErrorKind kind() const { return kind_; }
  int attempt_count() const { return attempts_; }

 private:
  LlmErrorKind kind_;
  int attempts_;
};

inline void validate(const LlmConfig& c) {
  if (c.max_in_flight < 1) throw LlmError(LlmErrorKind::config, "max_in_flight must be at least 1");
  if (c.max_retries < 0) throw LlmError(LlmErrorKind::config, "max_retries must be non-negative");
  if (!(c.timeout_seconds > 0)) throw LlmError(LlmErrorKind::config, "timeout_seconds must be positive");
}

inline nlohmann::json to_json(const LlmConfig& c) {
  return {{"temperature", c.temperature},
          {"top_p", c.top_p},
          {"top_k", c.top_k},
          {"repetition_penalty", c.repetition_penalty},
          {"max_output_tokens", c.max_output_tokens},
          {"model_name", c.model_name},
          {"endpoint_url", c.endpoint_url},
          {"timeout_seconds", c.timeout_seconds},
          {"max_retries", c.max_retries},
          {"max_in_flight", c.max_in_flight},
          {"backoff_initial_ms", c.backoff_initial_ms},
          {"backoff_max_ms", c.backoff_max_ms},
          {"api_key_env", c.api_key_env}};
}

inline LlmConfig llm_config_from_json(const nlohmann::json& j, LlmConfig c = {}) {
  c.temperature = j.value("temperature", c.temperature);
  c.top_p = j.value("top_p", c.top_p);
  c.top_k = j.value("top_k", c.top_k);
  c.repetition_penalty = j.value("repetition_penalty", c.repetition_penalty);
  c.max_output_tokens = j.value("max_output_tokens", c.max_output_tokens);
  c.model_name = j.value("model_name", c.model_name);
  c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
  c.backoff_max_ms = j.value("backoff_max_ms", c.backoff_max_ms);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  return c;
}

/// Byte-deterministic: nlohmann objects serialize with sorted keys.
inline std::string request_body(const PromptBundle& b, const LlmConfig& c) {
  nlohmann::json body = {
      {"model", c.model_name},
      {"messages",
       nlohmann::json::array({{{"role", "system"}, {"content", b.system_text}}, {{"role", "user"}, {"content", b.user_text}}})},
      {"temperature", c.temperature},
      {"top_p", c.top_p},
      {"top_k", c.top_k},
      {"repetition_penalty", c.repetition_penalty},
      {"max_tokens", c.max_output_tokens}};
  return body.dump();
}

namespace detail {

struct Endpoint {
  std::string scheme_host_port;
  std::string path_prefix;
};

inline Endpoint split_endpoint(const std::string& url) {
  if (url.rfind("http://", 0) != 0) {
    throw LlmError(LlmErrorKind::config, "endpoint_url must start with http:// (got '" + url + "')");
  }
  const auto slash = url.find('/', 7);
  Endpoint e{url.substr(0, slash), slash == std::string::npos ? "" : url.substr(slash)};
  while (!e.path_prefix.empty() && e.path_prefix.back() == '/') e.path_prefix.pop_back();
  if (e.scheme_host_port.size() <= 7) throw LlmError(LlmErrorKind::config, "endpoint_url has no host");
  return e;
}

}  // namespace detail

/// POSTs the bundle and returns the first choice's content verbatim. Transport failures and 5xx
/// are retried with exponential backoff; 4xx is not.
inline LlmResponse complete(const PromptBundle& bundle, const LlmConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  validate(cfg);
  if (cfg.endpoint_url.empty()) throw LlmError(LlmErrorKind::config, "the live backend needs endpoint_url");
  const auto ep = detail::split_endpoint(cfg.endpoint_url);
  const std::string path = ep.path_prefix + "/v1/chat/completions";

  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key && *key) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  LlmResponse out;
  out.request_body = request_body(bundle, cfg);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(cfg.timeout_seconds));
  int delay_ms = cfg.backoff_initial_ms;
  std::string last_error;
  bool last_was_timeout = false;

  for (int attempt = 1; attempt <= cfg.max_retries + 1; ++attempt) {
    if (attempt > 1) {
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      delay_ms = std::min(delay_ms * 2, cfg.backoff_max_ms);
    }
    out.attempt_count = attempt;
    httplib::Client client(ep.scheme_host_port);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    const auto start = Clock::now();
    auto res = client.Post(path, headers, out.request_body, "application/json");
    const auto elapsed = std::chrono::duration<double>(Clock::now() - start).count();
    out.latency_ms = elapsed * 1000.0;

    if (!res) {
      last_was_timeout = elapsed >= 0.9 * cfg.timeout_seconds;
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    last_was_timeout = false;
    out.response_body = res->body;
    if (res->status >= 500) {
      last_error = "server returned HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 400) {
      throw LlmError(LlmErrorKind::request, "endpoint rejected the request with HTTP " + std::to_string(res->status) +
                                                ": " + res->body.substr(0, 500), attempt);
    }
    const auto body = nlohmann::json::parse(res->body, nullptr, false);
    if (!body.is_object()) throw LlmError(LlmErrorKind::endpoint, "response body is not a JSON object", attempt);
    const auto choices = body.value("choices", nlohmann::json::array());
    if (!choices.is_array() || choices.empty()) {
      throw LlmError(LlmErrorKind::empty_response, "response contains no choices", attempt);
    }
    const auto& first = choices.front();
    if (!first.contains("message") || !first["message"].contains("content") ||
        !first["message"]["content"].is_string()) {
      throw LlmError(LlmErrorKind::empty_response, "first choice has no message content", attempt);
    }
    out.raw_text = first["message"]["content"].get<std::string>();
    out.model_name_echoed = body.value("model", std::string{});
    return out;
  }
  throw LlmError(last_was_timeout ? LlmErrorKind::timeout : LlmErrorKind::endpoint,
                 "giving up after " + std::to_string(out.attempt_count) + " attempts: " + last_error,
                 out.attempt_count);
}

// ---------------------------------------------------------------------------------------------
// Mock backend

/// Empty field means echo mode. Otherwise the named record field is perturbed with the given
/// probability per response.
struct CorruptionSpec {
  std::string field;
  double probability = 0.0;

  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

inline void validate(const CorruptionSpec& c) {
  if (!c.field.empty() && std::find_if(kRecordKeys.begin(), kRecordKeys.end(), [&](const char* k) {
                            return c.field == k;
                          }) == kRecordKeys.end()) {
    throw std::invalid_argument("unknown corruption field '" + c.field + "'");
  }
  if (!(c.probability >= 0.0 && c.probability <= 1.0)) {
    throw std::invalid_argument("corruption probability must lie in [0,1]");
  }
}

namespace detail {

inline std::string wrong_class(const std::string& right, const std::vector<std::string>& names) {
  const auto it = std::find(names.begin(), names.end(), right);
  if (it == names.end() || names.size() < 2) return right + "_wrong";
  return names[(static_cast<std::size_t>(it - names.begin()) + 1) % names.size()];
}

inline void perturb_ids(std::set<long long>& ids, long long target, std::mt19937_64& rng) {
  if (ids.empty()) {
    ids.insert(target);  // a node is never its own neighbor
    return;
  }
  auto it = ids.begin();
  std::advance(it, std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng));
  ids.erase(it);
}

inline void perturb_words(std::set<std::string>& words) {
  std::string extra = "unlisted_word";
  while (words.contains(extra)) extra += "_";
  words.insert(extra);
}

}  // namespace detail

inline LlmResponse mock_complete(const PromptBundle& bundle, const CorruptionSpec& corruption, std::uint64_t seed) {
  validate(corruption);
  const auto& t = bundle.ground_truth;
  ExtractionRecord rec{t.target_node,         t.factual_class,      t.counterfactual_class,   t.factual_neighbors,
                       t.counterfactual_neighbors, t.factual_features, t.counterfactual_features};

  if (!corruption.field.empty()) {
    const std::uint64_t h = std::stoull(prompt_hash(bundle), nullptr, 16);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    std::mt19937_64 rng(seq);
    if (std::bernoulli_distribution(corruption.probability)(rng)) {
      const auto& f = corruption.field;
      if (f == "target_node") rec.target_node += 1;
      else if (f == "factual_class") rec.factual_class = detail::wrong_class(t.factual_class, t.class_names);
      else if (f == "counterfactual_class") rec.counterfactual_class = detail::wrong_class(t.counterfactual_class, t.class_names);
      else if (f == "factual_neighbors") detail::perturb_ids(rec.factual_neighbors, t.target_node, rng);
      else if (f == "counterfactual_neighbors") detail::perturb_ids(rec.counterfactual_neighbors, t.target_node, rng);
      else if (f == "factual_features") detail::perturb_words(rec.factual_features);
      else detail::perturb_words(rec.counterfactual_features);
    }
  }

  LlmResponse out;
  out.model_name_echoed = "mock";
  out.attempt_count = 1;
  out.raw_text = "Node " + std::to_string(t.target_node) +
                 " changes class because the counterfactual graph removes part of the evidence that supported "
                 "its original prediction. The record below lists what differs between the two graphs.\n\n"
                 "```json\n" + to_json(rec).dump(2) + "\n```\n";
  return out;
}

}  // namespace cfx
