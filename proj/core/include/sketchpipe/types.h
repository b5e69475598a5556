// SPDX-License-Identifier: Apache-2.0
//
// Core records shared by every stage: the code-rendered VQA instance and the
// interleaved trajectory the agentic loop produces for it.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace sketchpipe {

inline constexpr int kSchemaVersion = 1;

enum class InstanceSource { kSyntheticCorpus, kImg2Code };

enum class Termination {
  kAnswered,
  kMaxSteps,
  kRenderFailureBackoff,
  kBackendError,
};

std::string_view to_string(InstanceSource s);
std::string_view to_string(Termination t);
InstanceSource parse_instance_source(std::string_view s);
Termination parse_termination(std::string_view s);

/// Rendering program C plus the renderer profile that turns it into pixels.
struct RenderSpec {
  std::string language_tag;
  std::string source_text;
  std::string renderer_profile;

  bool operator==(const RenderSpec&) const = default;
};

/// The (code, image, question, answer) tuple.
struct VQAInstance {
  std::string id;
  RenderSpec code;
  std::string image_hash;  // empty until the instance has been rendered
  std::string question;
  std::string answer;
  InstanceSource source = InstanceSource::kSyntheticCorpus;
  std::optional<std::string> discipline;

  bool operator==(const VQAInstance&) const = default;
};

struct TrajectoryStep {
  std::size_t t = 0;
  std::string image_hash;
  std::string reasoning;
  std::optional<std::string> action;  // edit request instruction, if any
  bool edit_failed = false;

  bool operator==(const TrajectoryStep&) const = default;
};

struct Trajectory {
  std::string id;
  std::string instance_id;
  std::vector<TrajectoryStep> steps;
  std::optional<std::string> final_answer;
  Termination termination = Termination::kAnswered;

  bool operator==(const Trajectory&) const = default;
};

/// Throws Error(kInvariantViolation) describing the first broken rule.
void validate_trajectory(const Trajectory& t);
void validate_instance(const VQAInstance& inst);

nlohmann::json to_json(const RenderSpec& spec);
nlohmann::json to_json(const VQAInstance& inst);
nlohmann::json to_json(const Trajectory& t);

RenderSpec render_spec_from_json(const nlohmann::json& j);
/// image_hash may be absent in operator-supplied instance files.
VQAInstance instance_from_json(const nlohmann::json& j);
/// Rejects records whose schema_version is not the supported major version.
Trajectory trajectory_from_json(const nlohmann::json& j);

}  // namespace sketchpipe
