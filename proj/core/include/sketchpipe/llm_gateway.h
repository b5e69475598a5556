// SPDX-License-Identifier: Apache-2.0
//
// Chat-completion gateway shared by the Solver and Code Editor roles.
//
// Three backends sit behind one interface:
//   HttpChatBackend      OpenAI-compatible /chat/completions over HTTP(S)
//   ScriptedBackend      deterministic replay of a transcript file
//   RecordingBackend     wraps another backend and writes a replayable transcript
#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace sketchpipe {

enum class ChatRole { kSystem, kUser, kAssistant };
enum class RoleTag { kSolver, kEditor };

std::string_view to_string(ChatRole r);
std::string_view to_string(RoleTag r);
RoleTag parse_role_tag(std::string_view s);

struct ContentPart {
  enum class Kind { kText, kImage };
  Kind kind = Kind::kText;
  std::string text;          // kText
  std::string image_digest;  // kImage, refers to a stored blob

  static ContentPart of_text(std::string t) { return {Kind::kText, std::move(t), {}}; }
  static ContentPart of_image(std::string digest) { return {Kind::kImage, {}, std::move(digest)}; }
  bool operator==(const ContentPart&) const = default;
};

struct ChatMessage {
  ChatRole role = ChatRole::kUser;
  std::vector<ContentPart> content;

  static ChatMessage text(ChatRole role, std::string t);
  /// Concatenation of the text parts.
  std::string text_content() const;
  bool operator==(const ChatMessage&) const = default;
};

nlohmann::json to_json(const ChatMessage& m);
nlohmann::json to_json(const std::vector<ChatMessage>& messages);
/// SHA-256 of the canonical JSON encoding of the messages.
std::string prompt_digest(const std::vector<ChatMessage>& messages);

/// Throws Error(kInvalidArgument) for empty content or a bad image reference.
void validate_messages(const std::vector<ChatMessage>& messages);

struct CompletionParams {
  double temperature = 0.0;
  int max_tokens = 2048;
  int n_samples = 1;
  std::optional<std::int64_t> seed;

  void validate() const;
  static CompletionParams from_json(const nlohmann::json& j);
  static CompletionParams from_json(const nlohmann::json& j, const CompletionParams& defaults);
};

/// Declared defaults: diverse sampling for pass@k, greedy for smoke runs.
inline constexpr double kSolverSamplingTemperature = 0.7;
inline constexpr double kDeterministicTemperature = 0.0;

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Returns exactly params.n_samples assistant messages.
  virtual std::vector<ChatMessage> complete(const std::vector<ChatMessage>& messages,
                                            const CompletionParams& params, RoleTag role) = 0;
};

/// Convenience: text of each returned completion.
std::vector<std::string> complete_texts(ChatBackend& backend,
                                        const std::vector<ChatMessage>& messages,
                                        const CompletionParams& params, RoleTag role);

struct TranscriptEntry {
  std::size_t turn = 0;
  RoleTag role_tag = RoleTag::kSolver;
  std::vector<std::string> responses;
  std::string prompt_digest;

  nlohmann::json to_json() const;
  static TranscriptEntry from_json(const nlohmann::json& j);
};

struct ScriptedOptions {
  bool strict = false;
};

/// Replays a transcript by turn index: the i-th complete() call consumes
/// turn i. Several lines with the same turn number are concatenated in file
/// order. Strict mode additionally checks role tags and prompt digests.
class ScriptedBackend : public ChatBackend {
 public:
  using Options = ScriptedOptions;

  explicit ScriptedBackend(std::vector<TranscriptEntry> turns, Options options);
  explicit ScriptedBackend(std::vector<TranscriptEntry> turns)
      : ScriptedBackend(std::move(turns), Options{}) {}
  static std::unique_ptr<ScriptedBackend> from_file(const std::filesystem::path& path,
                                                    Options options = {});
  /// Shorthand for tests: one turn per element, each holding those responses.
  static std::unique_ptr<ScriptedBackend> from_responses(
      RoleTag role, const std::vector<std::vector<std::string>>& turns);

  std::vector<ChatMessage> complete(const std::vector<ChatMessage>& messages,
                                    const CompletionParams& params, RoleTag role) override;

  std::size_t calls() const;
  std::size_t remaining() const;

 private:
  std::vector<TranscriptEntry> turns_;
  Options options_;
  mutable std::mutex mu_;
  std::size_t cursor_ = 0;
};

/// Writes every (request, responses) pair as a transcript line. The sink is
/// truncated on construction, so zero calls leave an empty transcript.
class RecordingBackend : public ChatBackend {
 public:
  RecordingBackend(std::shared_ptr<ChatBackend> inner, const std::filesystem::path& sink);

  std::vector<ChatMessage> complete(const std::vector<ChatMessage>& messages,
                                    const CompletionParams& params, RoleTag role) override;

 private:
  std::shared_ptr<ChatBackend> inner_;
  std::mutex mu_;
  std::ofstream sink_;
  std::size_t turn_ = 0;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_delay{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_delay{8'000};

  /// Sleep before attempt i+1 (i = 0 .. max_attempts-2). Non-decreasing and
  /// capped at max_delay.
  std::vector<std::chrono::milliseconds> delays() const;
};

/// Resolves a stored image digest to its bytes for inline transmission.
using BlobResolver = std::function<std::vector<std::uint8_t>(std::string_view digest)>;

struct HttpBackendConfig {
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string model;
  std::string api_key;
  std::chrono::milliseconds request_timeout{120'000};
  RetryPolicy retry;
  std::size_t max_in_flight = 4;
  std::size_t max_image_bytes = 8u << 20;
  BlobResolver resolve_blob;
  std::function<void(std::chrono::milliseconds)> sleep;  // injectable for tests
};

/// OpenAI-compatible chat completions with exponential backoff on transient
/// failures (transport errors, 408, 429, 5xx).
class HttpChatBackend : public ChatBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig config);

  std::vector<ChatMessage> complete(const std::vector<ChatMessage>& messages,
                                    const CompletionParams& params, RoleTag role) override;

  /// Request body as sent on the wire (exposed for tests).
  nlohmann::json build_request(const std::vector<ChatMessage>& messages,
                               const CompletionParams& params, int n) const;

  std::size_t attempts_made() const { return attempts_.load(); }

 private:
  std::vector<std::string> post_with_retry(const nlohmann::json& body);

  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::counting_semaphore<> in_flight_;
  std::atomic<std::size_t> attempts_{0};
};

}  // namespace sketchpipe
