// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/agentic_loop.h"

#include <algorithm>

#include "sketchpipe/error.h"
#include "sketchpipe/log.h"

namespace sketchpipe {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t count(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string_view::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

[[noreturn]] void malformed(const std::string& why) {
  throw Error(ErrorCode::kMalformedOutput, why);
}

// Offset of the first line whose first non-blank text is the answer delimiter.
std::optional<std::size_t> find_answer_line(std::string_view text) {
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    const auto nl = text.find('\n', line_start);
    const auto line = text.substr(line_start, nl == std::string_view::npos ? std::string_view::npos
                                                                           : nl - line_start);
    const auto lead = line.find_first_not_of(" \t");
    if (lead != std::string_view::npos && line.substr(lead).starts_with(kAnswerDelimiter)) {
      return line_start + lead;
    }
    if (nl == std::string_view::npos) break;
    line_start = nl + 1;
  }
  return std::nullopt;
}

bool is_backend_failure(const Error& e) {
  return e.code() == ErrorCode::kBackendError || e.code() == ErrorCode::kTranscriptMismatch;
}

}  // namespace

SolverTurn parse_solver_output(std::string_view text) {
  if (trim(text).empty()) malformed("empty solver output");
  const std::size_t opens = count(text, kToolCallOpen);
  const std::size_t closes = count(text, kToolCallClose);
  if (opens > 1 || closes > 1) malformed("more than one tool call");
  const auto open = text.find(kToolCallOpen);
  const auto close = text.find(kToolCallClose);
  if (opens == 1 && closes == 0) malformed("unclosed <tool_call>");
  if (closes == 1 && (opens == 0 || close < open)) malformed("</tool_call> without opening tag");

  const auto answer_at = find_answer_line(text);
  const bool has_action = opens == 1;
  const bool has_answer = answer_at.has_value();
  if (has_action && has_answer) malformed("output contains both a final answer and a tool call");
  if (!has_action && !has_answer) malformed("output contains neither a final answer nor a tool call");

  SolverTurn turn;
  if (has_answer) {
    const auto answer = trim(text.substr(*answer_at + kAnswerDelimiter.size()));
    if (answer.empty()) malformed("empty final answer");
    turn.reasoning = std::string(trim(text.substr(0, *answer_at)));
    turn.answer = std::string(answer);
    return turn;
  }
  const auto body_begin = open + kToolCallOpen.size();
  const std::string_view raw = text.substr(body_begin, close - body_begin);
  const auto instruction = trim(raw);
  if (instruction.empty()) malformed("empty edit request");
  turn.reasoning = std::string(trim(text.substr(0, open)));
  if (turn.reasoning.empty()) malformed("edit request without reasoning");
  turn.action = EditRequest{std::string(instruction), std::string(raw)};
  return turn;
}

std::string extract_program(std::string_view reply) {
  const auto fence = reply.find("```");
  if (fence != std::string_view::npos) {
    const auto body = reply.find('\n', fence);
    if (body != std::string_view::npos) {
      const auto end = reply.find("```", body + 1);
      return std::string(reply.substr(body + 1, end == std::string_view::npos
                                                    ? std::string_view::npos
                                                    : end - body - 1));
    }
  }
  return std::string(trim(reply));
}

std::string fill_template(std::string_view templ,
                          const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out(templ);
  for (const auto& [key, value] : values) {
    const std::string placeholder = "{" + key + "}";
    for (auto p = out.find(placeholder); p != std::string::npos;
         p = out.find(placeholder, p + value.size())) {
      out.replace(p, placeholder.size(), value);
    }
  }
  return out;
}

// ---------------------------------------------------------------- templates

PromptTemplates PromptTemplates::defaults() {
  PromptTemplates t;
  t.solver_system =
      "You are a careful visual reasoner. Think step by step about the image. When the "
      "image is ambiguous or an extra view would help, request one edit of the image by "
      "writing the instruction inside <tool_call></tool_call>. Otherwise finish with a line "
      "starting with 'FINAL ANSWER:'. Never do both in one reply.";
  t.question = "{question}";
  t.edit_result = "Here is the image after applying your edit: {edit_result}";
  t.failure_notice =
      "The requested edit could not be rendered ({failure_notice}). The previous image is "
      "shown again.";
  t.force_answer = "You have used all edit steps. Give your final answer now on a line "
                   "starting with 'FINAL ANSWER:'.";
  t.corrective_note =
      "Your previous reply was rejected: {error}. Reply with reasoning followed by either "
      "one <tool_call>...</tool_call> or one 'FINAL ANSWER:' line, not both.";
  t.challenge =
      "Critically inspect the rendered image. If it does not satisfy your request "
      "'{instruction}', reply with a revised instruction inside <tool_call></tool_call>. "
      "Otherwise reply 'accepted'.";
  t.proceed = "Continue your reasoning.";
  t.editor_system =
      "You edit plotting programs. Return the complete edited program, never a diff.";
  t.editor_request = "Program:\n```\n{code}\n```\nApply this edit: {instruction}";
  t.editor_history = "Earlier request '{instruction}' applied to:\n```\n{code}\n```";
  t.editor_repair =
      "This program failed to render.\n```\n{code}\n```\nError log:\n{error_log}\nReturn the "
      "complete fixed program.";
  return t;
}

PromptTemplates PromptTemplates::from_json(const nlohmann::json& j) {
  PromptTemplates t = defaults();
  auto take = [&](const char* key, std::string& field) {
    if (j.contains(key)) field = j.at(key).get<std::string>();
  };
  take("solver_system", t.solver_system);
  take("question", t.question);
  take("edit_result", t.edit_result);
  take("failure_notice", t.failure_notice);
  take("force_answer", t.force_answer);
  take("corrective_note", t.corrective_note);
  take("challenge", t.challenge);
  take("proceed", t.proceed);
  take("editor_system", t.editor_system);
  take("editor_request", t.editor_request);
  take("editor_history", t.editor_history);
  take("editor_repair", t.editor_repair);
  return t;
}

void PromptTemplates::validate() const {
  auto need = [](const std::string& templ, const char* placeholder, const char* name) {
    if (templ.find(placeholder) == std::string::npos) {
      throw Error(ErrorCode::kConfig,
                  std::string("template '") + name + "' lacks placeholder " + placeholder);
    }
  };
  need(question, "{question}", "question");
  need(failure_notice, "{failure_notice}", "failure_notice");
  need(edit_result, "{edit_result}", "edit_result");
  need(editor_request, "{code}", "editor_request");
  need(editor_request, "{instruction}", "editor_request");
  need(editor_repair, "{code}", "editor_repair");
  need(editor_repair, "{error_log}", "editor_repair");
}

void EpisodeConfig::validate() const {
  if (t_max < 1) throw Error(ErrorCode::kConfig, "t_max must be >= 1");
  if (r_max < 0) throw Error(ErrorCode::kConfig, "r_max must be >= 0");
  if (revisions_cap < 0) throw Error(ErrorCode::kConfig, "revisions_cap must be >= 0");
  if (malformed_reprompts < 0) throw Error(ErrorCode::kConfig, "malformed_reprompts must be >= 0");
  templates.validate();
  solver_params.validate();
  editor_params.validate();
}

EpisodeConfig EpisodeConfig::from_json(const nlohmann::json& j) {
  EpisodeConfig c;
  try {
    c.t_max = j.value("t_max", c.t_max);
    c.r_max = j.value("r_max", c.r_max);
    c.challenge_enabled = j.value("challenge_enabled", c.challenge_enabled);
    c.revisions_cap = j.value("revisions_cap", c.revisions_cap);
    c.malformed_reprompts = j.value("malformed_reprompts", c.malformed_reprompts);
    c.abort_after_backoffs = j.value("abort_after_backoffs", c.abort_after_backoffs);
    if (j.contains("templates")) c.templates = PromptTemplates::from_json(j.at("templates"));
    if (j.contains("solver_params")) {
      c.solver_params = CompletionParams::from_json(j.at("solver_params"), c.solver_params);
    }
    if (j.contains("editor_params")) {
      c.editor_params = CompletionParams::from_json(j.at("editor_params"), c.editor_params);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("episode config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- challenge

ChallengeResult challenge_round(ChatBackend& solver, const std::string& edit_result_image,
                                const std::vector<ChatMessage>& prior_dialog,
                                const std::string& instruction, const EpisodeConfig& cfg) {
  std::vector<ChatMessage> messages = prior_dialog;
  ChatMessage ask{ChatRole::kUser,
                  {ContentPart::of_text(fill_template(cfg.templates.edit_result,
                                                      {{"edit_result", instruction}})),
                   ContentPart::of_image(edit_result_image),
                   ContentPart::of_text(fill_template(cfg.templates.challenge,
                                                      {{"instruction", instruction}}))}};
  messages.push_back(std::move(ask));
  CompletionParams params = cfg.solver_params;
  params.n_samples = 1;
  ChallengeResult result;
  result.raw = solver.complete(messages, params, RoleTag::kSolver).at(0).text_content();
  try {
    SolverTurn turn = parse_solver_output(result.raw);
    if (turn.action) {
      result.accepted = false;
      result.revision = std::move(turn.action);
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kMalformedOutput) throw;
    // A bare "accepted" reply lands here as well; only tool calls revise.
    result.malformed = result.raw.find(kToolCallOpen) != std::string::npos ||
                       result.raw.find(kToolCallClose) != std::string::npos;
    if (result.malformed) log::warn("challenge reply malformed; accepting", {{"error", e.what()}});
  }
  return result;
}

// ------------------------------------------------------------------ episode

namespace {

class Episode {
 public:
  Episode(const VQAInstance& instance, ChatBackend& solver, ChatBackend& editor,
          Renderer& renderer, const BlobStore& blobs, const EpisodeConfig& cfg, std::string id)
      : instance_(instance), solver_(solver), editor_(editor), renderer_(renderer),
        blobs_(blobs), cfg_(cfg) {
    result_.trajectory.id = std::move(id);
    result_.trajectory.instance_id = instance.id;
  }

  EpisodeResult run();

 private:
  struct Turn {
    SolverTurn parsed;
    std::string raw;
  };

  struct EditOutcome {
    bool ok = false;
    std::string reason;
  };

  class CountingRenderer : public Renderer {
   public:
    explicit CountingRenderer(Episode& ep) : ep_(ep) {}
    RenderOutcome render(const RenderSpec& spec) override {
      ep_.note_call("render");
      ++ep_.result_.stats.render_calls;
      auto out = ep_.renderer_.render(spec);
      // Wall time stays out of the event log so reruns are byte-identical.
      ep_.event("render", {{"status", std::string(to_string(out.status))}});
      return out;
    }
    ImageLimits limits() const override { return ep_.renderer_.limits(); }

   private:
    Episode& ep_;
  };

  class RepairAdapter : public CodeEditorBackend {
   public:
    explicit RepairAdapter(Episode& ep) : ep_(ep) {}
    std::string fix(const RenderSpec& code, std::string_view error_log) override {
      std::vector<ChatMessage> messages{
          ChatMessage::text(ChatRole::kSystem, ep_.cfg_.templates.editor_system),
          ChatMessage::text(ChatRole::kUser,
                            fill_template(ep_.cfg_.templates.editor_repair,
                                          {{"code", code.source_text},
                                           {"error_log", std::string(error_log)}}))};
      ep_.note_call("editor:repair");
      ++ep_.result_.stats.editor_calls;
      const auto reply = ep_.editor_call(messages);
      std::string program = extract_program(reply);
      ep_.event("editor_repair", {{"code_digest", ep_.stash(program)}});
      return program;
    }

   private:
    Episode& ep_;
  };

  void note_call(std::string what) { result_.calls.push_back(std::move(what)); }

  void event(std::string name, nlohmann::json fields = nlohmann::json::object()) {
    fields["seq"] = result_.events.size();
    fields["event"] = std::move(name);
    fields["t"] = t_;
    result_.events.push_back(std::move(fields));
  }

  std::string stash(const std::string& text) {
    if (text.empty()) return {};
    return blobs_.put(std::string_view(text));
  }

  std::string editor_call(const std::vector<ChatMessage>& messages) {
    CompletionParams p = cfg_.editor_params;
    p.n_samples = 1;
    return editor_.complete(messages, p, RoleTag::kEditor).at(0).text_content();
  }

  std::optional<Turn> solver_turn(ChatMessage user, bool forced);
  EditOutcome edit(const EditRequest& request);
  void push_step(std::string reasoning, std::optional<std::string> action) {
    result_.trajectory.steps.push_back(
        TrajectoryStep{result_.trajectory.steps.size(), image_, std::move(reasoning),
                       std::move(action), false});
  }
  EpisodeResult finish(Termination how, std::optional<std::string> answer = std::nullopt) {
    result_.trajectory.termination = how;
    result_.trajectory.final_answer = std::move(answer);
    result_.solver_dialog = dialog_;
    event("end", {{"termination", std::string(to_string(how))}});
    validate_trajectory(result_.trajectory);
    return std::move(result_);
  }

  const VQAInstance& instance_;
  ChatBackend& solver_;
  ChatBackend& editor_;
  Renderer& renderer_;
  const BlobStore& blobs_;
  const EpisodeConfig& cfg_;

  EpisodeResult result_;
  std::vector<ChatMessage> dialog_;  // D_S
  std::vector<std::pair<std::string, std::string>> editor_dialog_;  // D_E: (C_t, Act_t)
  RenderSpec code_;
  std::string image_;
  int t_ = 0;
};

std::optional<Episode::Turn> Episode::solver_turn(ChatMessage user, bool forced) {
  std::vector<ChatMessage> messages = dialog_;
  messages.push_back(user);
  CompletionParams p = cfg_.solver_params;
  p.n_samples = 1;
  for (int attempt = 0;; ++attempt) {
    note_call("solver");
    ++result_.stats.solver_calls;
    std::string raw = solver_.complete(messages, p, RoleTag::kSolver).at(0).text_content();
    std::string error;
    try {
      SolverTurn parsed = parse_solver_output(raw);
      if (forced && parsed.action) malformed("edit requested after the step budget");
      event("solver_turn", {{"raw", raw}, {"forced", forced}});
      // Append (I_t, R_t, Act_t) to D_S before branching on the answer.
      dialog_.push_back(std::move(user));
      dialog_.push_back(ChatMessage::text(ChatRole::kAssistant, raw));
      return Turn{std::move(parsed), std::move(raw)};
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kMalformedOutput) throw;
      error = e.what();
    }
    event("solver_malformed", {{"raw", raw}, {"error", error}, {"attempt", attempt}});
    if (attempt >= cfg_.malformed_reprompts) return std::nullopt;
    ++result_.stats.reprompts;
    messages.push_back(ChatMessage::text(ChatRole::kAssistant, raw));
    messages.push_back(ChatMessage::text(
        ChatRole::kSystem, fill_template(cfg_.templates.corrective_note, {{"error", error}})));
  }
}

Episode::EditOutcome Episode::edit(const EditRequest& request) {
  // C_{t+1} <- LLM_E(C_t, Act_t, D_E)
  std::vector<ChatMessage> messages{
      ChatMessage::text(ChatRole::kSystem, cfg_.templates.editor_system)};
  for (const auto& [code, instruction] : editor_dialog_) {
    messages.push_back(ChatMessage::text(
        ChatRole::kUser, fill_template(cfg_.templates.editor_history,
                                       {{"code", code}, {"instruction", instruction}})));
  }
  messages.push_back(ChatMessage::text(
      ChatRole::kUser, fill_template(cfg_.templates.editor_request,
                                     {{"code", code_.source_text},
                                      {"instruction", request.instruction}})));
  note_call("editor");
  ++result_.stats.editor_calls;
  RenderSpec candidate = code_;
  candidate.source_text = extract_program(editor_call(messages));
  event("editor_edit", {{"instruction", request.instruction},
                        {"code_digest", stash(candidate.source_text)}});

  // Validate C_{t+1}; repair or back off. I_{t+1} <- R(C_{t+1}).
  CountingRenderer counting(*this);
  RepairAdapter repairer(*this);
  RepairResult repaired = repair_loop(candidate, counting, repairer, cfg_.r_max);

  editor_dialog_.emplace_back(code_.source_text, request.instruction);

  if (!repaired.ok()) {
    return {false, repaired.backoff().last_reason};
  }
  const std::string digest = blobs_.put(std::span<const std::uint8_t>(repaired.success().image_bytes));
  if (digest == image_) {
    return {false, "edit produced no visible change"};
  }
  code_ = repaired.success().code;
  image_ = digest;
  event("edit_applied", {{"image_hash", digest}, {"repairs", repaired.editor_calls}});
  return {true, {}};
}

EpisodeResult Episode::run() {
  image_ = render_initial_image(instance_, renderer_, blobs_);
  code_ = instance_.code;
  event("start", {{"instance_id", instance_.id}, {"image_hash", image_}});

  dialog_.push_back(ChatMessage::text(ChatRole::kSystem, cfg_.templates.solver_system));
  ChatMessage pending{ChatRole::kUser,
                      {ContentPart::of_text(fill_template(cfg_.templates.question,
                                                          {{"question", instance_.question}})),
                       ContentPart::of_image(image_)}};
  int consecutive_backoffs = 0;

  for (t_ = 0;; ++t_) {
    const bool forced = t_ >= cfg_.t_max;
    if (forced) pending.content.push_back(ContentPart::of_text(cfg_.templates.force_answer));

    std::optional<Turn> turn;
    try {
      turn = solver_turn(pending, forced);
    } catch (const Error& e) {
      if (!is_backend_failure(e)) throw;
      event("backend_error", {{"role", "solver"}, {"error", e.what()}});
      push_step("", std::nullopt);
      return finish(Termination::kBackendError);
    }
    if (!turn) {
      push_step("", std::nullopt);
      return finish(forced ? Termination::kMaxSteps : Termination::kBackendError);
    }
    if (turn->parsed.answer) {
      push_step(turn->parsed.reasoning, std::nullopt);
      return finish(forced ? Termination::kMaxSteps : Termination::kAnswered, turn->parsed.answer);
    }

    EditRequest request = *turn->parsed.action;
    push_step(turn->parsed.reasoning, request.instruction);
    int revisions = 0;
    for (;;) {
      EditOutcome outcome;
      try {
        outcome = edit(request);
      } catch (const Error& e) {
        if (!is_backend_failure(e)) throw;
        event("backend_error", {{"role", "editor"}, {"error", e.what()}});
        return finish(Termination::kBackendError);
      }

      if (!outcome.ok) {
        result_.trajectory.steps.back().edit_failed = true;
        ++result_.stats.backoffs;
        ++consecutive_backoffs;
        event("backoff", {{"reason", outcome.reason}});
        if (cfg_.abort_after_backoffs > 0 && consecutive_backoffs >= cfg_.abort_after_backoffs) {
          return finish(Termination::kRenderFailureBackoff);
        }
        pending = ChatMessage{ChatRole::kUser,
                              {ContentPart::of_text(fill_template(
                                   cfg_.templates.failure_notice, {{"failure_notice", outcome.reason}})),
                               ContentPart::of_image(image_)}};
        break;
      }
      consecutive_backoffs = 0;

      ChatMessage shown{ChatRole::kUser,
                        {ContentPart::of_text(fill_template(cfg_.templates.edit_result,
                                                            {{"edit_result", request.instruction}})),
                         ContentPart::of_image(image_)}};
      // A revision occupies the next step, which must still precede the
      // forced-answer turn.
      if (!cfg_.challenge_enabled || t_ + 1 >= cfg_.t_max) {
        pending = std::move(shown);
        break;
      }

      ChallengeResult challenge;
      note_call("solver:challenge");
      ++result_.stats.challenge_calls;
      try {
        challenge = challenge_round(solver_, image_, dialog_, request.instruction, cfg_);
      } catch (const Error& e) {
        if (!is_backend_failure(e)) throw;
        event("backend_error", {{"role", "solver"}, {"error", e.what()}});
        push_step("", std::nullopt);
        return finish(Termination::kBackendError);
      }
      shown.content.push_back(ContentPart::of_text(
          fill_template(cfg_.templates.challenge, {{"instruction", request.instruction}})));
      dialog_.push_back(std::move(shown));
      dialog_.push_back(ChatMessage::text(ChatRole::kAssistant, challenge.raw));

      if (challenge.accepted || revisions >= cfg_.revisions_cap) {
        if (!challenge.accepted) {
          ++result_.stats.forced_accepts;
          event("challenge_force_accepted", {{"raw", challenge.raw}});
        } else {
          event("challenge_accepted", {{"raw", challenge.raw}, {"malformed", challenge.malformed}});
        }
        pending = ChatMessage::text(ChatRole::kUser, cfg_.templates.proceed);
        break;
      }

      ++revisions;
      ++result_.stats.revisions;
      ++t_;
      request = *challenge.revision;
      SolverTurn revised = parse_solver_output(challenge.raw);
      event("challenge_revision", {{"instruction", request.instruction}});
      push_step(revised.reasoning, request.instruction);
    }
  }
}

}  // namespace

std::string render_initial_image(const VQAInstance& instance, Renderer& renderer,
                                 const BlobStore& blobs) {
  if (!instance.image_hash.empty() && blobs.contains(instance.image_hash)) {
    return instance.image_hash;
  }
  const RenderOutcome outcome = renderer.render(instance.code);
  const Validation v = validate(outcome, renderer.limits());
  if (!v.pass) {
    throw Error(ErrorCode::kInvalidArgument,
                "instance " + instance.id + ": initial render failed: " + v.reason);
  }
  std::string digest = blobs.put(std::span<const std::uint8_t>(*outcome.image_bytes));
  if (!instance.image_hash.empty() && digest != instance.image_hash) {
    throw Error(ErrorCode::kInvariantViolation,
                "instance " + instance.id + ": rendered image digest " + digest +
                    " differs from recorded " + instance.image_hash);
  }
  return digest;
}

EpisodeResult run_episode(const VQAInstance& instance, ChatBackend& solver, ChatBackend& editor,
                          Renderer& renderer, const BlobStore& blobs, const EpisodeConfig& cfg,
                          std::string trajectory_id) {
  cfg.validate();
  validate_instance(instance);
  if (trajectory_id.empty()) trajectory_id = "traj-" + instance.id;
  Episode episode(instance, solver, editor, renderer, blobs, cfg, std::move(trajectory_id));
  return episode.run();
}

}  // namespace sketchpipe
