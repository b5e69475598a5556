// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/types.h"

#include "sketchpipe/error.h"
#include "sketchpipe/hash.h"

namespace sketchpipe {

namespace {

[[noreturn]] void violation(const std::string& what) {
  throw Error(ErrorCode::kInvariantViolation, what);
}

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

std::optional<std::string> optional_string(const nlohmann::json& j,
                                           const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

}  // namespace

std::string_view to_string(InstanceSource s) {
  switch (s) {
    case InstanceSource::kSyntheticCorpus: return "synthetic_corpus";
    case InstanceSource::kImg2Code: return "img2code";
  }
  return "synthetic_corpus";
}

std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::kAnswered: return "answered";
    case Termination::kMaxSteps: return "max_steps";
    case Termination::kRenderFailureBackoff: return "render_failure_backoff";
    case Termination::kBackendError: return "backend_error";
  }
  return "answered";
}

InstanceSource parse_instance_source(std::string_view s) {
  if (s == "synthetic_corpus") return InstanceSource::kSyntheticCorpus;
  if (s == "img2code") return InstanceSource::kImg2Code;
  throw Error(ErrorCode::kInvalidArgument,
              "unknown instance source '" + std::string(s) + "'");
}

Termination parse_termination(std::string_view s) {
  if (s == "answered") return Termination::kAnswered;
  if (s == "max_steps") return Termination::kMaxSteps;
  if (s == "render_failure_backoff") return Termination::kRenderFailureBackoff;
  if (s == "backend_error") return Termination::kBackendError;
  throw Error(ErrorCode::kInvalidArgument,
              "unknown termination '" + std::string(s) + "'");
}

void validate_instance(const VQAInstance& inst) {
  if (inst.id.empty()) violation("instance id is empty");
  if (blank(inst.answer)) violation("instance " + inst.id + ": empty answer");
  if (inst.code.source_text.empty()) {
    violation("instance " + inst.id + ": empty rendering code");
  }
  if (!inst.image_hash.empty() && !is_hex_digest(inst.image_hash)) {
    violation("instance " + inst.id + ": malformed image_hash");
  }
}

void validate_trajectory(const Trajectory& t) {
  const std::string where = "trajectory " + t.id + ": ";
  if (t.id.empty()) violation("trajectory id is empty");
  if (t.instance_id.empty()) violation(where + "empty instance_id");
  if (t.steps.empty()) violation(where + "no steps");

  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    if (s.t != i) violation(where + "step index mismatch at " + std::to_string(i));
    if (!is_hex_digest(s.image_hash)) {
      violation(where + "malformed image_hash at step " + std::to_string(i));
    }
    if (s.action && blank(*s.action)) {
      violation(where + "blank edit request at step " + std::to_string(i));
    }
    if (s.edit_failed && !s.action) {
      violation(where + "edit_failed without an action at step " +
                std::to_string(i));
    }
  }

  // Every non-final step issued an edit; its successor shows a new image or
  // the edit was flagged as failed (previous image re-used).
  for (std::size_t i = 0; i + 1 < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    if (!s.action) {
      violation(where + "non-final step " + std::to_string(i) +
                " carries no edit request");
    }
    if (!s.edit_failed && t.steps[i + 1].image_hash == s.image_hash) {
      violation(where + "edit at step " + std::to_string(i) +
                " neither changed the image nor was flagged failed");
    }
  }

  const auto& last = t.steps.back();
  const bool aborted = t.termination == Termination::kBackendError ||
                       t.termination == Termination::kRenderFailureBackoff;
  if (last.action && !aborted) {
    violation(where + "final step carries an edit request");
  }
  if (last.action && t.termination == Termination::kRenderFailureBackoff &&
      !last.edit_failed) {
    violation(where + "render_failure_backoff without a failed final edit");
  }
  if (t.termination == Termination::kAnswered && !t.final_answer) {
    violation(where + "answered without a final answer");
  }
  if (t.final_answer) {
    if (t.termination != Termination::kAnswered &&
        t.termination != Termination::kMaxSteps) {
      violation(where + "final answer on an aborted trajectory");
    }
    if (last.action) violation(where + "final answer and action on one step");
  }
}

nlohmann::json to_json(const RenderSpec& spec) {
  return {{"language_tag", spec.language_tag},
          {"source_text", spec.source_text},
          {"renderer_profile", spec.renderer_profile}};
}

nlohmann::json to_json(const VQAInstance& inst) {
  nlohmann::json j = {{"id", inst.id},
                      {"code", to_json(inst.code)},
                      {"image_hash", inst.image_hash},
                      {"question", inst.question},
                      {"answer", inst.answer},
                      {"source", std::string(to_string(inst.source))},
                      {"discipline", nullptr}};
  if (inst.discipline) j["discipline"] = *inst.discipline;
  return j;
}

nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) {
    nlohmann::json js = {{"t", s.t},
                         {"image_hash", s.image_hash},
                         {"reasoning", s.reasoning},
                         {"action", nullptr},
                         {"edit_failed", s.edit_failed}};
    if (s.action) js["action"] = *s.action;
    steps.push_back(std::move(js));
  }
  nlohmann::json j = {{"schema_version", kSchemaVersion},
                      {"id", t.id},
                      {"instance_id", t.instance_id},
                      {"steps", std::move(steps)},
                      {"final_answer", nullptr},
                      {"termination", std::string(to_string(t.termination))}};
  if (t.final_answer) j["final_answer"] = *t.final_answer;
  return j;
}

RenderSpec render_spec_from_json(const nlohmann::json& j) {
  RenderSpec spec;
  spec.language_tag = j.value("language_tag", "");
  spec.source_text = j.at("source_text").get<std::string>();
  spec.renderer_profile = j.at("renderer_profile").get<std::string>();
  return spec;
}

VQAInstance instance_from_json(const nlohmann::json& j) {
  VQAInstance inst;
  inst.id = j.at("id").get<std::string>();
  inst.code = render_spec_from_json(j.at("code"));
  if (auto h = optional_string(j, "image_hash")) inst.image_hash = *h;
  inst.question = j.at("question").get<std::string>();
  inst.answer = j.at("answer").get<std::string>();
  inst.source = parse_instance_source(j.value("source", "synthetic_corpus"));
  inst.discipline = optional_string(j, "discipline");
  return inst;
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  const int version = j.at("schema_version").get<int>();
  if (version != kSchemaVersion) {
    throw Error(ErrorCode::kSchemaVersion,
                "unsupported trajectory schema_version " +
                    std::to_string(version));
  }
  Trajectory t;
  t.id = j.at("id").get<std::string>();
  t.instance_id = j.at("instance_id").get<std::string>();
  for (const auto& js : j.at("steps")) {
    TrajectoryStep s;
    s.t = js.at("t").get<std::size_t>();
    s.image_hash = js.at("image_hash").get<std::string>();
    s.reasoning = js.at("reasoning").get<std::string>();
    s.action = optional_string(js, "action");
    s.edit_failed = js.at("edit_failed").get<bool>();
    t.steps.push_back(std::move(s));
  }
  t.final_answer = optional_string(j, "final_answer");
  t.termination = parse_termination(j.at("termination").get<std::string>());
  return t;
}

}  // namespace sketchpipe
