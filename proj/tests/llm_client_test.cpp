#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "cfx/llm_client.hpp"

using namespace cfx;

namespace {

PromptBundle bundle(long long target = 4) {
  PromptBundle b;
  b.system_text = "system";
  b.user_text = "user " + std::to_string(target);
  b.target = static_cast<NodeId>(target);
  auto& t = b.ground_truth;
  t.target_node = target;
  t.factual_class = "Theory";
  t.counterfactual_class = "Neural_Networks";
  t.factual_neighbors = {1, 2};
  t.counterfactual_neighbors = {2};
  t.factual_features = {"graph"};
  t.counterfactual_features = {"graph"};
  t.class_names = {"Theory", "Neural_Networks", "Case_Based"};
  return b;
}

/// Local endpoint answering from a scripted list of (status, body) pairs.
class FakeServer {
 public:
  explicit FakeServer(std::vector<std::pair<int, std::string>> script) : script_(std::move(script)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      bodies_.push_back(req.body);
      auth_ = req.get_header_value("Authorization");
      const auto i = std::min<std::size_t>(calls_++, script_.size() - 1);
      res.status = script_[i].first;
      res.set_content(script_[i].second, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::size_t calls() const { return calls_; }
  const std::vector<std::string>& bodies() const { return bodies_; }
  const std::string& auth() const { return auth_; }

 private:
  std::vector<std::pair<int, std::string>> script_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> calls_{0};
  std::vector<std::string> bodies_;
  std::string auth_;
};

std::string ok_body(const std::string& text) {
  return nlohmann::json{{"model", "served-model"},
                        {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}}}}
      .dump();
}

LlmConfig fast_config(const std::string& url) {
  LlmConfig c;
  c.endpoint_url = url;
  c.backoff_initial_ms = 1;
  c.backoff_max_ms = 4;
  c.timeout_seconds = 5;
  return c;
}

}  // namespace

TEST(LlmConfig, DefaultsMatchSamplingSettings) {
  const LlmConfig c;
  EXPECT_DOUBLE_EQ(c.temperature, 0.1);
  EXPECT_DOUBLE_EQ(c.top_p, 0.8);
  EXPECT_EQ(c.top_k, 30);
  EXPECT_DOUBLE_EQ(c.repetition_penalty, 1.05);
  EXPECT_EQ(c.max_output_tokens, 2048);
  EXPECT_GE(c.max_in_flight, 1);
  EXPECT_EQ(to_json(llm_config_from_json(to_json(c))), to_json(c));
}

TEST(RequestBody, DeterministicAndComplete) {
  const LlmConfig c;
  const auto body = request_body(bundle(), c);
  EXPECT_EQ(body, request_body(bundle(), c));
  const auto j = nlohmann::json::parse(body);
  EXPECT_EQ(j["messages"][0]["role"], "system");
  EXPECT_EQ(j["messages"][0]["content"], "system");
  EXPECT_EQ(j["messages"][1]["role"], "user");
  EXPECT_EQ(j["max_tokens"], 2048);
  EXPECT_EQ(j["top_k"], 30);
  EXPECT_FALSE(j.contains("ground_truth"));
  EXPECT_EQ(body.find("Neural_Networks"), std::string::npos);
}

TEST(Complete, PassesThroughFirstChoice) {
  FakeServer server({{200, ok_body("hello\n  world ```")}});
  const auto r = complete(bundle(), fast_config(server.url()));
  EXPECT_EQ(r.raw_text, "hello\n  world ```");
  EXPECT_EQ(r.attempt_count, 1);
  EXPECT_EQ(r.model_name_echoed, "served-model");
  ASSERT_EQ(server.bodies().size(), 1u);
  EXPECT_EQ(server.bodies()[0], request_body(bundle(), fast_config(server.url())));
}

TEST(Complete, RetriesServerErrors) {
  FakeServer server({{503, "busy"}, {503, "busy"}, {200, ok_body("done")}});
  auto cfg = fast_config(server.url());
  cfg.max_retries = 3;
  const auto r = complete(bundle(), cfg);
  EXPECT_EQ(r.raw_text, "done");
  EXPECT_EQ(r.attempt_count, 3);
}

TEST(Complete, GivesUpAfterRetries) {
  FakeServer server({{500, "down"}});
  auto cfg = fast_config(server.url());
  cfg.max_retries = 2;
  try {
    complete(bundle(), cfg);
    FAIL() << "expected an endpoint error";
  } catch (const LlmError& e) {
    EXPECT_EQ(e.kind(), LlmErrorKind::endpoint);
    EXPECT_EQ(e.attempt_count(), 3);
  }
  EXPECT_EQ(server.calls(), 3u);
}

TEST(Complete, ClientErrorIsNotRetried) {
  FakeServer server({{400, "bad"}, {200, ok_body("never")}});
  try {
    complete(bundle(), fast_config(server.url()));
    FAIL() << "expected a request error";
  } catch (const LlmError& e) {
    EXPECT_EQ(e.kind(), LlmErrorKind::request);
  }
  EXPECT_EQ(server.calls(), 1u);
}

TEST(Complete, ZeroChoicesIsEmptyResponse) {
  FakeServer server({{200, R"({"choices": []})"}});
  try {
    complete(bundle(), fast_config(server.url()));
    FAIL() << "expected an empty-response error";
  } catch (const LlmError& e) {
    EXPECT_EQ(e.kind(), LlmErrorKind::empty_response);
  }
}

TEST(Complete, UnreachableEndpoint) {
  auto cfg = fast_config("http://127.0.0.1:1");  // nothing listens on port 1
  cfg.max_retries = 1;
  try {
    complete(bundle(), cfg);
    FAIL() << "expected an endpoint error";
  } catch (const LlmError& e) {
    EXPECT_EQ(e.kind(), LlmErrorKind::endpoint);
    EXPECT_EQ(e.attempt_count(), 2);
  }
}

TEST(Complete, TimeoutIsReported) {
  httplib::Server server;
  server.Post("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(1500));
    res.set_content(ok_body("late"), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  auto cfg = fast_config("http://127.0.0.1:" + std::to_string(port));
  cfg.timeout_seconds = 0.3;
  cfg.max_retries = 0;
  try {
    complete(bundle(), cfg);
    ADD_FAILURE() << "expected a timeout";
  } catch (const LlmError& e) {
    EXPECT_EQ(e.kind(), LlmErrorKind::timeout);
  }
  server.stop();
  t.join();
}

TEST(Complete, ApiKeyFromEnvironment) {
  FakeServer server({{200, ok_body("x")}});
  setenv("CFX_TEST_KEY", "secret", 1);
  auto cfg = fast_config(server.url());
  cfg.api_key_env = "CFX_TEST_KEY";
  complete(bundle(), cfg);
  EXPECT_EQ(server.auth(), "Bearer secret");
  unsetenv("CFX_TEST_KEY");
}

TEST(Complete, ConfigErrors) {
  LlmConfig c;
  EXPECT_THROW(complete(bundle(), c), LlmError);  // no endpoint
  c.endpoint_url = "https://example.invalid";
  EXPECT_THROW(complete(bundle(), c), LlmError);
  c.endpoint_url = "http://127.0.0.1:1";
  c.max_in_flight = 0;
  EXPECT_THROW(complete(bundle(), c), LlmError);
}

TEST(MockComplete, EchoParsesToGroundTruth) {
  const auto b = bundle();
  const auto r = mock_complete(b, {}, 7);
  const auto parsed = parse_extraction(r.raw_text);
  ASSERT_TRUE(std::holds_alternative<ExtractionRecord>(parsed));
  EXPECT_EQ(compute_metrics(parsed, b.ground_truth).sum(), 6);
  EXPECT_EQ(r.raw_text, mock_complete(b, {}, 7).raw_text);
}

TEST(MockComplete, CertainCorruptionZeroesOnlyItsMetric) {
  const auto b = bundle();
  const std::vector<std::pair<std::string, int>> field_metric{
      {"target_node", 0}, {"factual_neighbors", 1}, {"counterfactual_class", 2}, {"factual_features", 3},
      {"counterfactual_features", 4}, {"counterfactual_neighbors", 5}};
  for (const auto& [field, idx] : field_metric) {
    const auto m = compute_metrics(parse_extraction(mock_complete(b, {field, 1.0}, 1).raw_text), b.ground_truth);
    for (int k = 0; k < 6; ++k) EXPECT_EQ(m.values()[k], k == idx ? 0 : 1) << field << " metric " << k;
  }
  // Factual class is not one of the six metrics.
  EXPECT_EQ(compute_metrics(parse_extraction(mock_complete(b, {"factual_class", 1.0}, 1).raw_text), b.ground_truth).sum(), 6);
}

TEST(MockComplete, EmptyNeighborSetGetsAFakeId) {
  auto b = bundle();
  b.ground_truth.counterfactual_neighbors.clear();
  const auto m =
      compute_metrics(parse_extraction(mock_complete(b, {"counterfactual_neighbors", 1.0}, 1).raw_text), b.ground_truth);
  EXPECT_EQ(m.cftnn, 0);
}

TEST(MockComplete, CorruptionRateMatchesProbability) {
  for (double rho : {0.3, 0.7}) {
    int hits = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto b = bundle(i);
      hits += compute_metrics(parse_extraction(mock_complete(b, {"factual_neighbors", rho}, 11).raw_text), b.ground_truth).tnnu;
    }
    EXPECT_NEAR(hits / 1000.0, 1.0 - rho, 0.05);
  }
}

TEST(MockComplete, UnknownFieldAndBadProbability) {
  EXPECT_THROW(mock_complete(bundle(), {"nonsense", 0.5}, 1), std::invalid_argument);
  EXPECT_THROW(mock_complete(bundle(), {"target_node", 1.5}, 1), std::invalid_argument);
}
