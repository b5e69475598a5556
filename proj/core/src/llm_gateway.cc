// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/llm_gateway.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "sketchpipe/error.h"
#include "sketchpipe/hash.h"
#include "sketchpipe/log.h"
#include "sketchpipe/renderer.h"

namespace sketchpipe {

std::string_view to_string(ChatRole r) {
  switch (r) {
    case ChatRole::kSystem: return "system";
    case ChatRole::kUser: return "user";
    case ChatRole::kAssistant: return "assistant";
  }
  return "user";
}

std::string_view to_string(RoleTag r) {
  return r == RoleTag::kSolver ? "solver" : "editor";
}

RoleTag parse_role_tag(std::string_view s) {
  if (s == "solver") return RoleTag::kSolver;
  if (s == "editor") return RoleTag::kEditor;
  throw Error(ErrorCode::kInvalidArgument, "unknown role_tag '" + std::string(s) + "'");
}

ChatMessage ChatMessage::text(ChatRole role, std::string t) {
  return ChatMessage{role, {ContentPart::of_text(std::move(t))}};
}

std::string ChatMessage::text_content() const {
  std::string out;
  for (const auto& p : content) {
    if (p.kind == ContentPart::Kind::kText) out += p.text;
  }
  return out;
}

nlohmann::json to_json(const ChatMessage& m) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : m.content) {
    if (p.kind == ContentPart::Kind::kText) {
      parts.push_back({{"type", "text"}, {"text", p.text}});
    } else {
      parts.push_back({{"type", "image"}, {"digest", p.image_digest}});
    }
  }
  return {{"role", std::string(to_string(m.role))}, {"content", std::move(parts)}};
}

nlohmann::json to_json(const std::vector<ChatMessage>& messages) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : messages) arr.push_back(to_json(m));
  return arr;
}

std::string prompt_digest(const std::vector<ChatMessage>& messages) {
  return sha256_hex(std::string_view(to_json(messages).dump()));
}

void validate_messages(const std::vector<ChatMessage>& messages) {
  if (messages.empty()) throw Error(ErrorCode::kInvalidArgument, "empty message list");
  for (const auto& m : messages) {
    if (m.content.empty()) throw Error(ErrorCode::kInvalidArgument, "message with empty content");
    for (const auto& p : m.content) {
      if (p.kind == ContentPart::Kind::kImage && !is_hex_digest(p.image_digest)) {
        throw Error(ErrorCode::kInvalidArgument,
                    "image part does not reference a blob digest: '" + p.image_digest + "'");
      }
    }
  }
}

void CompletionParams::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kInvalidArgument, "temperature must be a finite value >= 0");
  }
  if (max_tokens <= 0) throw Error(ErrorCode::kInvalidArgument, "max_tokens must be positive");
  if (n_samples <= 0) throw Error(ErrorCode::kInvalidArgument, "n_samples must be positive");
}

CompletionParams CompletionParams::from_json(const nlohmann::json& j) { return from_json(j, {}); }

CompletionParams CompletionParams::from_json(const nlohmann::json& j,
                                             const CompletionParams& defaults) {
  CompletionParams p = defaults;
  p.temperature = j.value("temperature", p.temperature);
  p.max_tokens = j.value("max_tokens", p.max_tokens);
  p.n_samples = j.value("n_samples", p.n_samples);
  if (j.contains("seed") && !j.at("seed").is_null()) p.seed = j.at("seed").get<std::int64_t>();
  p.validate();
  return p;
}

std::vector<std::string> complete_texts(ChatBackend& backend,
                                        const std::vector<ChatMessage>& messages,
                                        const CompletionParams& params, RoleTag role) {
  std::vector<std::string> out;
  for (const auto& m : backend.complete(messages, params, role)) out.push_back(m.text_content());
  return out;
}

// -------------------------------------------------------------- transcript

nlohmann::json TranscriptEntry::to_json() const {
  return {{"turn", turn},
          {"role_tag", std::string(sketchpipe::to_string(role_tag))},
          {"responses", responses},
          {"prompt_digest", prompt_digest}};
}

TranscriptEntry TranscriptEntry::from_json(const nlohmann::json& j) {
  TranscriptEntry e;
  e.turn = j.at("turn").get<std::size_t>();
  e.role_tag = parse_role_tag(j.at("role_tag").get<std::string>());
  e.responses = j.at("responses").get<std::vector<std::string>>();
  e.prompt_digest = j.value("prompt_digest", "");
  return e;
}

ScriptedBackend::ScriptedBackend(std::vector<TranscriptEntry> turns, Options options)
    : options_(options) {
  // Merge lines sharing a turn number, keeping file order within a turn.
  std::map<std::size_t, TranscriptEntry> grouped;
  for (auto& e : turns) {
    auto [it, inserted] = grouped.try_emplace(e.turn, e);
    if (inserted) continue;
    if (it->second.role_tag != e.role_tag) {
      throw Error(ErrorCode::kTranscriptMismatch,
                  "turn " + std::to_string(e.turn) + " mixes role tags");
    }
    it->second.responses.insert(it->second.responses.end(), e.responses.begin(),
                                e.responses.end());
  }
  std::size_t expected = 0;
  for (auto& [turn, e] : grouped) {
    if (turn != expected) {
      throw Error(ErrorCode::kTranscriptMismatch,
                  "transcript turns are not contiguous: missing turn " + std::to_string(expected));
    }
    ++expected;
    turns_.push_back(std::move(e));
  }
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path,
                                                            Options options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open transcript " + path.string());
  std::vector<TranscriptEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      entries.push_back(TranscriptEntry::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kTranscriptMismatch,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return std::make_unique<ScriptedBackend>(std::move(entries), options);
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_responses(
    RoleTag role, const std::vector<std::vector<std::string>>& turns) {
  std::vector<TranscriptEntry> entries;
  for (std::size_t i = 0; i < turns.size(); ++i) entries.push_back({i, role, turns[i], ""});
  return std::make_unique<ScriptedBackend>(std::move(entries));
}

std::vector<ChatMessage> ScriptedBackend::complete(const std::vector<ChatMessage>& messages,
                                                   const CompletionParams& params, RoleTag role) {
  params.validate();
  std::lock_guard lock(mu_);
  if (cursor_ >= turns_.size()) {
    throw Error(ErrorCode::kTranscriptMismatch,
                "scripted transcript exhausted after " + std::to_string(turns_.size()) + " turns");
  }
  const TranscriptEntry& e = turns_[cursor_];
  if (e.role_tag != role) {
    throw Error(ErrorCode::kTranscriptMismatch,
                "turn " + std::to_string(e.turn) + " is scripted for role " +
                    std::string(to_string(e.role_tag)) + ", called as " +
                    std::string(to_string(role)));
  }
  if (options_.strict && !e.prompt_digest.empty() && e.prompt_digest != prompt_digest(messages)) {
    throw Error(ErrorCode::kTranscriptMismatch,
                "turn " + std::to_string(e.turn) + " prompt digest differs");
  }
  if (e.responses.size() < static_cast<std::size_t>(params.n_samples)) {
    throw Error(ErrorCode::kTranscriptMismatch,
                "turn " + std::to_string(e.turn) + " holds " + std::to_string(e.responses.size()) +
                    " responses, " + std::to_string(params.n_samples) + " requested");
  }
  ++cursor_;
  std::vector<ChatMessage> out;
  for (int i = 0; i < params.n_samples; ++i) {
    out.push_back(ChatMessage::text(ChatRole::kAssistant, e.responses[static_cast<std::size_t>(i)]));
  }
  return out;
}

std::size_t ScriptedBackend::calls() const {
  std::lock_guard lock(mu_);
  return cursor_;
}

std::size_t ScriptedBackend::remaining() const {
  std::lock_guard lock(mu_);
  return turns_.size() - cursor_;
}

RecordingBackend::RecordingBackend(std::shared_ptr<ChatBackend> inner,
                                   const std::filesystem::path& sink)
    : inner_(std::move(inner)), sink_(sink, std::ios::trunc) {
  if (!sink_) throw Error(ErrorCode::kIo, "cannot open transcript sink " + sink.string());
}

std::vector<ChatMessage> RecordingBackend::complete(const std::vector<ChatMessage>& messages,
                                                    const CompletionParams& params, RoleTag role) {
  auto responses = inner_->complete(messages, params, role);
  TranscriptEntry e;
  e.role_tag = role;
  e.prompt_digest = prompt_digest(messages);
  for (const auto& r : responses) e.responses.push_back(r.text_content());
  std::lock_guard lock(mu_);
  e.turn = turn_++;
  sink_ << e.to_json().dump() << '\n';
  sink_.flush();
  if (!sink_) throw Error(ErrorCode::kIo, "transcript sink write failed");
  return responses;
}

// -------------------------------------------------------------------- http

std::vector<std::chrono::milliseconds> RetryPolicy::delays() const {
  std::vector<std::chrono::milliseconds> out;
  double d = static_cast<double>(initial_delay.count());
  const double cap = static_cast<double>(max_delay.count());
  const double factor = std::max(1.0, multiplier);
  for (int i = 0; i + 1 < max_attempts; ++i) {
    out.emplace_back(static_cast<long>(std::min(d, cap)));
    d *= factor;
  }
  return out;
}

namespace {

std::string mime_for(std::span<const std::uint8_t> bytes) {
  switch (sniff_container(bytes)) {
    case ImageContainer::kPng: return "image/png";
    case ImageContainer::kSvg: return "image/svg+xml";
    case ImageContainer::kUnknown: break;
  }
  return "application/octet-stream";
}

bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

HttpChatBackend::HttpChatBackend(HttpBackendConfig config)
    : config_(std::move(config)),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, config_.max_in_flight))) {
  const auto scheme_end = config_.base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kConfig, "base_url needs a scheme: '" + config_.base_url + "'");
  }
  const auto path_start = config_.base_url.find('/', scheme_end + 3);
  scheme_host_port_ = config_.base_url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  if (config_.retry.max_attempts < 1) throw Error(ErrorCode::kConfig, "retry.max_attempts must be >= 1");
  if (!config_.sleep) {
    config_.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
}

nlohmann::json HttpChatBackend::build_request(const std::vector<ChatMessage>& messages,
                                              const CompletionParams& params, int n) const {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages) {
    const bool text_only = std::all_of(m.content.begin(), m.content.end(), [](const ContentPart& p) {
      return p.kind == ContentPart::Kind::kText;
    });
    nlohmann::json jm = {{"role", std::string(to_string(m.role))}};
    if (text_only) {
      jm["content"] = m.text_content();
    } else {
      nlohmann::json parts = nlohmann::json::array();
      for (const auto& p : m.content) {
        if (p.kind == ContentPart::Kind::kText) {
          parts.push_back({{"type", "text"}, {"text", p.text}});
          continue;
        }
        if (!config_.resolve_blob) {
          throw Error(ErrorCode::kConfig, "image part sent to an HTTP backend without a blob resolver");
        }
        const auto bytes = config_.resolve_blob(p.image_digest);
        if (bytes.size() > config_.max_image_bytes) {
          throw Error(ErrorCode::kInvalidArgument,
                      "image " + p.image_digest + " exceeds the inline size cap");
        }
        parts.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:" + mime_for(bytes) + ";base64," +
                                                    base64_encode(bytes)}}}});
      }
      jm["content"] = std::move(parts);
    }
    msgs.push_back(std::move(jm));
  }
  nlohmann::json body = {{"model", config_.model},
                         {"messages", std::move(msgs)},
                         {"n", n},
                         {"temperature", params.temperature},
                         {"max_tokens", params.max_tokens}};
  if (params.seed) body["seed"] = *params.seed;
  return body;
}

std::vector<std::string> HttpChatBackend::post_with_retry(const nlohmann::json& body) {
  const auto delays = config_.retry.delays();
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  std::string last_error;
  for (int attempt = 0; attempt < config_.retry.max_attempts; ++attempt) {
    if (attempt > 0) config_.sleep(delays[static_cast<std::size_t>(attempt - 1)]);
    ++attempts_;
    httplib::Result res;
    {
      in_flight_.acquire();
      httplib::Client client(scheme_host_port_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.request_timeout);
      client.set_connection_timeout(std::chrono::seconds(10));
      client.set_read_timeout(secs);
      client.set_write_timeout(secs);
      res = client.Post(path_prefix_ + "/chat/completions", headers, payload, "application/json");
      in_flight_.release();
    }
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      log::warn("chat request failed", {{"attempt", attempt + 1}, {"error", last_error}});
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 500);
      if (!transient_status(res->status)) break;
      log::warn("chat request failed", {{"attempt", attempt + 1}, {"status", res->status}});
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      std::vector<std::string> out;
      for (const auto& choice : j.at("choices")) {
        const auto& content = choice.at("message").at("content");
        if (content.is_string()) {
          out.push_back(content.get<std::string>());
        } else if (content.is_array()) {
          std::string text;
          for (const auto& part : content) text += part.value("text", "");
          out.push_back(std::move(text));
        } else {
          out.emplace_back();
        }
      }
      return out;
    } catch (const std::exception& e) {
      last_error = std::string("unparseable completion response: ") + e.what();
      break;
    }
  }
  throw Error(ErrorCode::kBackendError, "chat backend failed: " + last_error);
}

std::vector<ChatMessage> HttpChatBackend::complete(const std::vector<ChatMessage>& messages,
                                                   const CompletionParams& params, RoleTag) {
  validate_messages(messages);
  params.validate();
  std::vector<ChatMessage> out;
  // Providers may ignore `n`; keep asking for the remainder.
  for (int round = 0; round < params.n_samples && static_cast<int>(out.size()) < params.n_samples;
       ++round) {
    const int want = params.n_samples - static_cast<int>(out.size());
    auto texts = post_with_retry(build_request(messages, params, want));
    if (texts.empty()) throw Error(ErrorCode::kBackendError, "completion response had no choices");
    for (auto& t : texts) {
      if (static_cast<int>(out.size()) == params.n_samples) break;
      out.push_back(ChatMessage::text(ChatRole::kAssistant, std::move(t)));
    }
  }
  if (static_cast<int>(out.size()) < params.n_samples) {
    throw Error(ErrorCode::kBackendError, "backend returned fewer completions than requested");
  }
  return out;
}

}  // namespace sketchpipe
