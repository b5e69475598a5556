// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "sketchpipe/datastore.h"
#include "sketchpipe/error.h"
#include "sketchpipe/hash.h"
#include "sketchpipe/llm_gateway.h"
#include "test_support.h"

using namespace sketchpipe;
using namespace std::chrono_literals;

namespace {

std::vector<ChatMessage> hello() {
  return {ChatMessage::text(ChatRole::kSystem, "be brief"), ChatMessage::text(ChatRole::kUser, "hi")};
}

CompletionParams n_of(int n) {
  CompletionParams p;
  p.n_samples = n;
  return p;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

// Loopback OpenAI-compatible endpoint whose replies are scripted per request.
class FakeServer {
 public:
  using Handler = std::function<void(const nlohmann::json& body, httplib::Response& res, int call)>;

  explicit FakeServer(Handler h) : handler_(std::move(h)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int call = calls_++;
      const auto body = nlohmann::json::parse(req.body);
      {
        std::lock_guard lock(mu_);
        bodies_.push_back(body);
        auth_.push_back(req.get_header_value("Authorization"));
      }
      handler_(body, res, call);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int calls() const { return calls_.load(); }
  nlohmann::json body(std::size_t i) {
    std::lock_guard lock(mu_);
    return bodies_.at(i);
  }
  std::string auth(std::size_t i) {
    std::lock_guard lock(mu_);
    return auth_.at(i);
  }

  static void reply(httplib::Response& res, const std::vector<std::string>& texts) {
    nlohmann::json choices = nlohmann::json::array();
    for (std::size_t i = 0; i < texts.size(); ++i) {
      choices.push_back({{"index", i}, {"message", {{"role", "assistant"}, {"content", texts[i]}}}});
    }
    res.set_content(nlohmann::json{{"choices", choices}}.dump(), "application/json");
  }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0};
  std::mutex mu_;
  std::vector<nlohmann::json> bodies_;
  std::vector<std::string> auth_;
};

HttpBackendConfig config_for(const FakeServer& s, std::vector<std::chrono::milliseconds>* slept) {
  HttpBackendConfig c;
  c.base_url = s.base_url();
  c.model = "test-model";
  c.api_key = "sk-test";
  c.request_timeout = 5s;
  c.sleep = [slept](std::chrono::milliseconds d) { slept->push_back(d); };
  return c;
}

}  // namespace

TEST(Messages, DigestIsStableAndContentSensitive) {
  EXPECT_EQ(prompt_digest(hello()), prompt_digest(hello()));
  auto other = hello();
  other[1].content[0].text = "hi!";
  EXPECT_NE(prompt_digest(hello()), prompt_digest(other));
  EXPECT_TRUE(is_hex_digest(prompt_digest(hello())));
}

TEST(Messages, Validation) {
  EXPECT_NO_THROW(validate_messages(hello()));
  EXPECT_THROW(validate_messages({}), Error);
  EXPECT_THROW(validate_messages({ChatMessage{ChatRole::kUser, {}}}), Error);
  EXPECT_THROW(validate_messages({ChatMessage{ChatRole::kUser, {ContentPart::of_image("cat.png")}}}), Error);
  EXPECT_NO_THROW(validate_messages({ChatMessage{ChatRole::kUser, {ContentPart::of_image(sha256_hex("x"))}}}));
}

TEST(CompletionParams, JsonWithDefaults) {
  CompletionParams base{0.7, 100, 2, std::nullopt};
  const auto p = CompletionParams::from_json(nlohmann::json::parse(R"({"max_tokens": 50, "seed": 3})"), base);
  EXPECT_DOUBLE_EQ(p.temperature, 0.7);
  EXPECT_EQ(p.max_tokens, 50);
  EXPECT_EQ(p.n_samples, 2);
  EXPECT_EQ(p.seed, 3);
  EXPECT_THROW(CompletionParams::from_json(nlohmann::json::parse(R"({"temperature": -1})")), Error);
  EXPECT_THROW(CompletionParams::from_json(nlohmann::json::parse(R"({"n_samples": 0})")), Error);
}

TEST(ScriptedBackend, ReplaysTurnsInOrder) {
  auto b = ScriptedBackend::from_responses(RoleTag::kSolver, {{"a"}, {"b", "c"}});
  EXPECT_EQ(complete_texts(*b, hello(), n_of(1), RoleTag::kSolver), std::vector<std::string>{"a"});
  EXPECT_EQ(complete_texts(*b, hello(), n_of(2), RoleTag::kSolver), (std::vector<std::string>{"b", "c"}));
  EXPECT_EQ(b->calls(), 2u);
  EXPECT_EQ(b->remaining(), 0u);
  EXPECT_EQ(code_of([&] { b->complete(hello(), n_of(1), RoleTag::kSolver); }),
            ErrorCode::kTranscriptMismatch);
}

TEST(ScriptedBackend, RoleAndCountMismatch) {
  auto b = ScriptedBackend::from_responses(RoleTag::kSolver, {{"a"}});
  EXPECT_EQ(code_of([&] { b->complete(hello(), n_of(1), RoleTag::kEditor); }), ErrorCode::kTranscriptMismatch);
  EXPECT_EQ(code_of([&] { b->complete(hello(), n_of(2), RoleTag::kSolver); }), ErrorCode::kTranscriptMismatch);
}

TEST(ScriptedBackend, FileMergesTurnsAndRejectsGaps) {
  test::TempDir dir;
  test::write_file(dir / "t.jsonl",
                      R"({"turn":0,"role_tag":"solver","responses":["x"]}
{"turn":1,"role_tag":"editor","responses":["y"]}
{"turn":0,"role_tag":"solver","responses":["z"]}
)");
  auto b = ScriptedBackend::from_file(dir / "t.jsonl");
  EXPECT_EQ(complete_texts(*b, hello(), n_of(2), RoleTag::kSolver), (std::vector<std::string>{"x", "z"}));
  EXPECT_EQ(complete_texts(*b, hello(), n_of(1), RoleTag::kEditor), std::vector<std::string>{"y"});

  test::write_file(dir / "gap.jsonl", R"({"turn":1,"role_tag":"solver","responses":["x"]})");
  EXPECT_EQ(code_of([&] { ScriptedBackend::from_file(dir / "gap.jsonl"); }), ErrorCode::kTranscriptMismatch);
  test::write_file(dir / "bad.jsonl", "{oops\n");
  EXPECT_EQ(code_of([&] { ScriptedBackend::from_file(dir / "bad.jsonl"); }), ErrorCode::kTranscriptMismatch);
  EXPECT_EQ(code_of([&] { ScriptedBackend::from_file(dir / "missing.jsonl"); }), ErrorCode::kIo);
}

TEST(RecordingBackend, RecordThenStrictReplay) {
  test::TempDir dir;
  auto inner = std::shared_ptr<ChatBackend>(
      ScriptedBackend::from_responses(RoleTag::kSolver, {{"one"}, {"two", "three"}}));
  {
    RecordingBackend rec(inner, dir / "rec.jsonl");
    rec.complete(hello(), n_of(1), RoleTag::kSolver);
    auto second = hello();
    second.push_back(ChatMessage::text(ChatRole::kUser, "more"));
    rec.complete(second, n_of(2), RoleTag::kSolver);
  }
  auto replay = ScriptedBackend::from_file(dir / "rec.jsonl", ScriptedOptions{true});
  EXPECT_EQ(complete_texts(*replay, hello(), n_of(1), RoleTag::kSolver), std::vector<std::string>{"one"});
  // Same turn, different prompt: strict replay refuses.
  EXPECT_EQ(code_of([&] { replay->complete(hello(), n_of(2), RoleTag::kSolver); }),
            ErrorCode::kTranscriptMismatch);
}

TEST(RecordingBackend, ZeroCallsLeaveEmptyTranscript) {
  test::TempDir dir;
  test::write_file(dir / "rec.jsonl", "stale\n");
  {
    RecordingBackend rec(std::shared_ptr<ChatBackend>(ScriptedBackend::from_responses(RoleTag::kSolver, {})),
                         dir / "rec.jsonl");
  }
  EXPECT_EQ(test::read_file(dir / "rec.jsonl"), "");
}

TEST(RetryPolicy, DelaysAreCappedAndMonotone) {
  RetryPolicy p;
  p.max_attempts = 6;
  p.initial_delay = 100ms;
  p.multiplier = 3.0;
  p.max_delay = 1000ms;
  EXPECT_EQ(p.delays(), (std::vector<std::chrono::milliseconds>{100ms, 300ms, 900ms, 1000ms, 1000ms}));
  p.max_attempts = 1;
  EXPECT_TRUE(p.delays().empty());
}

TEST(HttpChatBackend, BuildsOpenAiRequestWithInlineImages) {
  test::TempDir dir;
  BlobStore blobs(dir.path());
  const auto png = test::png_bytes("img");
  const std::string d = blobs.put(std::span<const std::uint8_t>(png));
  HttpBackendConfig c;
  c.base_url = "http://localhost:1/v1";
  c.model = "m";
  c.resolve_blob = [&](std::string_view digest) { return blobs.get(digest); };
  HttpChatBackend b(c);
  std::vector<ChatMessage> msgs{ChatMessage::text(ChatRole::kSystem, "sys"),
                                ChatMessage{ChatRole::kUser, {ContentPart::of_text("look"), ContentPart::of_image(d)}}};
  CompletionParams p{0.5, 64, 1, 42};
  const auto body = b.build_request(msgs, p, 3);
  EXPECT_EQ(body.at("model"), "m");
  EXPECT_EQ(body.at("n"), 3);
  EXPECT_EQ(body.at("seed"), 42);
  EXPECT_EQ(body.at("messages")[0].at("content"), "sys");
  const auto& parts = body.at("messages")[1].at("content");
  EXPECT_EQ(parts[0].at("type"), "text");
  EXPECT_EQ(parts[1].at("image_url").at("url"), "data:image/png;base64," + base64_encode(png));

  c.max_image_bytes = 4;
  HttpChatBackend small(c);
  EXPECT_THROW(small.build_request(msgs, p, 1), Error);
  c.resolve_blob = nullptr;
  HttpChatBackend blind(c);
  EXPECT_THROW(blind.build_request(msgs, p, 1), Error);
  c.base_url = "localhost:1";
  EXPECT_THROW(HttpChatBackend{c}, Error);
}

TEST(HttpChatBackend, RetriesTransientFailures) {
  FakeServer server([](const nlohmann::json&, httplib::Response& res, int call) {
    if (call == 0) {
      res.status = 429;
      res.set_content("slow down", "text/plain");
    } else if (call == 1) {
      res.status = 503;
    } else {
      FakeServer::reply(res, {"fine"});
    }
  });
  std::vector<std::chrono::milliseconds> slept;
  HttpChatBackend b(config_for(server, &slept));
  EXPECT_EQ(complete_texts(b, hello(), n_of(1), RoleTag::kSolver), std::vector<std::string>{"fine"});
  EXPECT_EQ(server.calls(), 3);
  EXPECT_EQ(b.attempts_made(), 3u);
  EXPECT_EQ(slept, (std::vector<std::chrono::milliseconds>{500ms, 1000ms}));
  EXPECT_EQ(server.auth(0), "Bearer sk-test");
  EXPECT_EQ(server.body(0).at("model"), "test-model");
}

TEST(HttpChatBackend, PermanentErrorFailsFast) {
  FakeServer server([](const nlohmann::json&, httplib::Response& res, int) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  std::vector<std::chrono::milliseconds> slept;
  HttpChatBackend b(config_for(server, &slept));
  EXPECT_EQ(code_of([&] { b.complete(hello(), n_of(1), RoleTag::kSolver); }), ErrorCode::kBackendError);
  EXPECT_EQ(server.calls(), 1);
  EXPECT_TRUE(slept.empty());
}

TEST(HttpChatBackend, ExhaustsRetries) {
  FakeServer server([](const nlohmann::json&, httplib::Response& res, int) { res.status = 500; });
  std::vector<std::chrono::milliseconds> slept;
  auto cfg = config_for(server, &slept);
  cfg.retry.max_attempts = 3;
  HttpChatBackend b(cfg);
  EXPECT_EQ(code_of([&] { b.complete(hello(), n_of(1), RoleTag::kSolver); }), ErrorCode::kBackendError);
  EXPECT_EQ(server.calls(), 3);
}

TEST(HttpChatBackend, AsksAgainWhenProviderIgnoresN) {
  FakeServer server([](const nlohmann::json& body, httplib::Response& res, int call) {
    (void)body;
    FakeServer::reply(res, {"s" + std::to_string(call)});
  });
  std::vector<std::chrono::milliseconds> slept;
  HttpChatBackend b(config_for(server, &slept));
  EXPECT_EQ(complete_texts(b, hello(), n_of(3), RoleTag::kSolver), (std::vector<std::string>{"s0", "s1", "s2"}));
  EXPECT_EQ(server.body(0).at("n"), 3);
  EXPECT_EQ(server.body(2).at("n"), 1);
}

TEST(HttpChatBackend, MalformedResponseIsBackendError) {
  FakeServer server([](const nlohmann::json&, httplib::Response& res, int) {
    res.set_content("{\"no_choices\": true}", "application/json");
  });
  std::vector<std::chrono::milliseconds> slept;
  HttpChatBackend b(config_for(server, &slept));
  EXPECT_EQ(code_of([&] { b.complete(hello(), n_of(1), RoleTag::kSolver); }), ErrorCode::kBackendError);
}

TEST(HttpChatBackend, TransportErrorRetries) {
  HttpBackendConfig c;
  c.base_url = "http://127.0.0.1:9/v1";  // discard port, nothing listens
  c.model = "m";
  c.retry.max_attempts = 2;
  std::vector<std::chrono::milliseconds> slept;
  c.sleep = [&](std::chrono::milliseconds d) { slept.push_back(d); };
  HttpChatBackend b(c);
  EXPECT_EQ(code_of([&] { b.complete(hello(), n_of(1), RoleTag::kSolver); }), ErrorCode::kBackendError);
  EXPECT_EQ(b.attempts_made(), 2u);
  EXPECT_EQ(slept.size(), 1u);
}
