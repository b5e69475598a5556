// SPDX-License-Identifier: Apache-2.0
//
// Solver / Code Editor episode driver.
//
// One episode walks a single VQA instance:
//   t = 0 .. T_max-1  Solver reasons over the current image and either
//                     answers or emits <tool_call>edit</tool_call>;
//                     the Code Editor rewrites the full program, which is
//                     rendered, validated and repaired or backed off.
//   t = T_max         one forced-answer turn.
// Dialog order follows the curation algorithm: the Solver turn is appended to
// the Solver dialog before branching, and (C_t, Act_t) is appended to the
// editor dialog after the edit is rendered.
#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/datastore.h"
#include "sketchpipe/llm_gateway.h"
#include "sketchpipe/renderer.h"
#include "sketchpipe/types.h"

namespace sketchpipe {

inline constexpr std::string_view kAnswerDelimiter = "FINAL ANSWER:";
inline constexpr std::string_view kToolCallOpen = "<tool_call>";
inline constexpr std::string_view kToolCallClose = "</tool_call>";

struct EditRequest {
  std::string instruction;  // trimmed, non-empty
  std::string raw_span;     // text between the delimiters, verbatim
};

/// Exactly one of answer / action is set.
struct SolverTurn {
  std::string reasoning;
  std::optional<std::string> answer;
  std::optional<EditRequest> action;
};

/// Throws Error(kMalformedOutput) when the text holds both an answer and a
/// tool call, neither, an unclosed or repeated delimiter, or an empty payload.
SolverTurn parse_solver_output(std::string_view text);

/// Program text from an editor reply: the first fenced block if any,
/// otherwise the whole reply trimmed.
std::string extract_program(std::string_view reply);

/// Substitutes {name} placeholders.
std::string fill_template(std::string_view templ,
                          const std::vector<std::pair<std::string, std::string>>& values);

struct PromptTemplates {
  std::string solver_system;
  std::string question;         // {question}
  std::string edit_result;      // {edit_result}
  std::string failure_notice;   // {failure_notice}
  std::string force_answer;
  std::string corrective_note;  // {error}
  std::string challenge;        // {instruction}
  std::string proceed;
  std::string editor_system;
  std::string editor_request;   // {code} {instruction}
  std::string editor_history;   // {code} {instruction}
  std::string editor_repair;    // {code} {error_log}

  static PromptTemplates defaults();
  static PromptTemplates from_json(const nlohmann::json& j);
  /// Throws Error(kConfig) when a required placeholder is missing.
  void validate() const;
};

struct EpisodeConfig {
  int t_max = 5;
  int r_max = 3;
  bool challenge_enabled = false;
  int revisions_cap = 2;
  int malformed_reprompts = 2;
  int abort_after_backoffs = 0;  // consecutive backoffs that end the episode; 0 = never
  PromptTemplates templates = PromptTemplates::defaults();
  CompletionParams solver_params{kDeterministicTemperature, 2048, 1, std::nullopt};
  CompletionParams editor_params{kDeterministicTemperature, 4096, 1, std::nullopt};

  void validate() const;
  static EpisodeConfig from_json(const nlohmann::json& j);
};

struct ChallengeResult {
  bool accepted = true;
  std::optional<EditRequest> revision;
  std::string raw;
  bool malformed = false;  // unparseable reply, treated as accept
};

/// Asks the Solver whether the rendered edit satisfies `instruction`. A
/// well-formed tool call is a revision; anything else accepts.
ChallengeResult challenge_round(ChatBackend& solver, const std::string& edit_result_image,
                                const std::vector<ChatMessage>& prior_dialog,
                                const std::string& instruction, const EpisodeConfig& cfg);

struct EpisodeStats {
  int solver_calls = 0;
  int editor_calls = 0;
  int render_calls = 0;
  int challenge_calls = 0;
  int reprompts = 0;
  int revisions = 0;
  int forced_accepts = 0;
  int backoffs = 0;
};

struct EpisodeResult {
  Trajectory trajectory;
  EpisodeStats stats;
  /// Backend and renderer invocations in order: "solver", "solver:challenge",
  /// "editor", "editor:repair", "render".
  std::vector<std::string> calls;
  /// Turn-by-turn debug log, one JSON object per event.
  std::vector<nlohmann::json> events;
  /// Final Solver dialog.
  std::vector<ChatMessage> solver_dialog;
};

/// Runs one episode. Renders C_0 when the instance has no stored image;
/// throws if that initial render fails or disagrees with image_hash.
/// Backend failures end the episode with termination=backend_error.
EpisodeResult run_episode(const VQAInstance& instance, ChatBackend& solver, ChatBackend& editor,
                          Renderer& renderer, const BlobStore& blobs, const EpisodeConfig& cfg,
                          std::string trajectory_id = {});

/// Renders the instance code, stores the image and returns its digest.
std::string render_initial_image(const VQAInstance& instance, Renderer& renderer,
                                 const BlobStore& blobs);

}  // namespace sketchpipe
