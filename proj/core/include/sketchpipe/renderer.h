// SPDX-License-Identifier: Apache-2.0
//
// Sandboxed execution of rendering programs, image validation and the
// render -> validate -> repair loop used for every code edit.
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/types.h"

namespace sketchpipe {

enum class RenderStatus { kOk, kSyntaxError, kRuntimeError, kTimeout, kEmptyOutput };

std::string_view to_string(RenderStatus s);

struct RenderOutcome {
  RenderStatus status = RenderStatus::kRuntimeError;
  std::optional<std::vector<std::uint8_t>> image_bytes;  // set iff status == kOk
  std::string stderr_log;
  std::chrono::milliseconds wall_time{0};

  static RenderOutcome ok(std::vector<std::uint8_t> bytes, std::string log = {});
  static RenderOutcome failed(RenderStatus status, std::string log);
};

/// One renderer runtime. `command` is an argv template holding exactly one
/// "{code}" and one "{output}" placeholder.
struct RendererProfile {
  std::vector<std::string> command;
  std::optional<std::chrono::milliseconds> timeout;
  std::string preamble;  // prepended to every program (seed pinning etc.)
  std::string code_suffix = ".txt";
  std::string output_suffix = ".png";
  std::string syntax_error_pattern = "syntax ?error|parse error|unexpected token";
};

struct ImageLimits {
  std::size_t min_bytes = 8;
  std::size_t max_output_bytes = 16u << 20;
};

struct SandboxPolicy {
  std::chrono::milliseconds timeout{10'000};
  std::chrono::milliseconds grace{1'000};
  ImageLimits limits;
  bool isolate_working_dir = true;
  bool network_disabled = true;
  std::filesystem::path temp_root;  // empty: $SKETCHPIPE_SANDBOX_ROOT or system temp
  std::map<std::string, RendererProfile> profiles;

  /// Throws Error(kConfig) on a non-positive timeout or bad command template.
  void validate() const;
  const RendererProfile& profile(std::string_view name) const;

  static SandboxPolicy from_json(const nlohmann::json& renderer_section);
};

inline constexpr const char* kSandboxRootEnv = "SKETCHPIPE_SANDBOX_ROOT";

class Renderer {
 public:
  virtual ~Renderer() = default;
  virtual RenderOutcome render(const RenderSpec& spec) = 0;
  virtual ImageLimits limits() const { return {}; }
};

/// Runs each program in a fresh subprocess: private temp working directory,
/// own process group (killed as a tree on timeout), output-size rlimit and a
/// best-effort network namespace.
class SandboxRenderer : public Renderer {
 public:
  explicit SandboxRenderer(SandboxPolicy policy);

  /// Throws Error(kProfileNotFound) or Error(kSandboxSetup); program
  /// failures are reported through the outcome status instead.
  RenderOutcome render(const RenderSpec& spec) override;
  ImageLimits limits() const override { return policy_.limits; }
  const SandboxPolicy& policy() const { return policy_; }

 private:
  SandboxPolicy policy_;
};

RenderOutcome render(const RenderSpec& spec, const SandboxPolicy& policy);

struct Validation {
  bool pass = false;
  std::string reason;
};

enum class ImageContainer { kUnknown, kPng, kSvg };

ImageContainer sniff_container(std::span<const std::uint8_t> bytes);

/// Passes iff the outcome is ok and carries a PNG, or a well-formed SVG
/// document, whose size lies in [min_bytes, max_output_bytes].
Validation validate(const RenderOutcome& outcome, const ImageLimits& limits = {});

/// Supplies a fixed-up program given the failing one and its error log.
class CodeEditorBackend {
 public:
  virtual ~CodeEditorBackend() = default;
  virtual std::string fix(const RenderSpec& code, std::string_view error_log) = 0;
};

struct RepairSuccess {
  RenderSpec code;
  std::vector<std::uint8_t> image_bytes;
};

struct RepairBackoff {
  RenderSpec last_code;
  std::string last_reason;
};

struct RepairResult {
  std::variant<RepairSuccess, RepairBackoff> result;
  int editor_calls = 0;
  int render_calls = 0;
  std::vector<std::string> failures;  // validation reason per failed attempt

  bool ok() const { return std::holds_alternative<RepairSuccess>(result); }
  const RepairSuccess& success() const { return std::get<RepairSuccess>(result); }
  const RepairBackoff& backoff() const { return std::get<RepairBackoff>(result); }
};

/// render -> validate; on failure hand the code and log to the editor, up to
/// `max_repairs` times. Exhaustion yields a backoff value, never an
/// exception. Editor backend errors propagate.
RepairResult repair_loop(const RenderSpec& code, Renderer& renderer,
                         CodeEditorBackend& editor, int max_repairs);

/// Renders independent programs on a bounded worker pool, preserving order.
std::vector<RenderOutcome> render_all(Renderer& renderer,
                                      const std::vector<RenderSpec>& specs,
                                      std::size_t width);

}  // namespace sketchpipe
