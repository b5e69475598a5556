// SPDX-License-Identifier: Apache-2.0
#include "test_support.h"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "sketchpipe/hash.h"

namespace sketchpipe::test {

namespace fs = std::filesystem;

TempDir::TempDir() {
  std::string templ = (fs::temp_directory_path() / "sketchpipe-test-XXXXXX").string();
  if (::mkdtemp(templ.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
  path_ = templ;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::vector<std::uint8_t> png_bytes(std::string_view payload) {
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::string png_digest(std::string_view payload) {
  return sha256_hex(std::span<const std::uint8_t>(png_bytes(payload)));
}

RenderOutcome FakeRenderer::render(const RenderSpec& spec) {
  ++calls_;
  const std::string& s = spec.source_text;
  if (s.starts_with("FAIL:")) return RenderOutcome::failed(RenderStatus::kRuntimeError, "Traceback: " + s);
  if (s.starts_with("SYNTAX:")) return RenderOutcome::failed(RenderStatus::kSyntaxError, "SyntaxError: " + s);
  if (s.starts_with("EMPTY")) return RenderOutcome::failed(RenderStatus::kEmptyOutput, "no figure saved");
  return RenderOutcome::ok(png_bytes(s));
}

SandboxPolicy sh_policy(std::chrono::milliseconds timeout) {
  SandboxPolicy p;
  p.timeout = timeout;
  p.grace = std::chrono::milliseconds(500);
  RendererProfile sh;
  sh.command = {"sh", "{code}", "{output}"};
  sh.code_suffix = ".sh";
  p.profiles.emplace("sh", sh);
  return p;
}

std::string png_script(std::string_view payload) {
  return "printf '\\211PNG\\r\\n\\032\\n" + std::string(payload) + "' > \"$1\"\n";
}

VQAInstance make_instance(std::string id, std::string code, std::string question,
                          std::string answer) {
  VQAInstance inst;
  inst.id = std::move(id);
  inst.code = RenderSpec{"python", std::move(code), "fake"};
  inst.question = std::move(question);
  inst.answer = std::move(answer);
  return inst;
}

Trajectory random_trajectory(std::mt19937_64& rng, const std::string& id,
                             const std::string& instance_id) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto digest = [&] { return sha256_hex(std::to_string(rng())); };
  static const char* kWords[] = {"zoom", "into", "the", "left", "axis", "bar", "highlight",
                                 "label", "é", "\"quoted\"", "tab\there", "line\nbreak"};
  auto text = [&](int words) {
    std::string s;
    for (int i = 0; i < words; ++i) {
      if (i) s += ' ';
      s += kWords[pick(0, 11)];
    }
    return s;
  };

  Trajectory t;
  t.id = id;
  t.instance_id = instance_id;
  const int n = pick(1, 6);
  const int term = pick(0, 3);
  t.termination = static_cast<Termination>(term);
  std::string image = digest();
  for (int i = 0; i < n; ++i) {
    TrajectoryStep s;
    s.t = static_cast<std::size_t>(i);
    s.image_hash = image;
    s.reasoning = text(pick(0, 8));
    const bool last = i + 1 == n;
    const bool aborted = t.termination == Termination::kBackendError ||
                         t.termination == Termination::kRenderFailureBackoff;
    if (!last || (aborted && pick(0, 1) == 1) || t.termination == Termination::kRenderFailureBackoff) {
      s.action = "zoom " + text(pick(1, 5));
      s.edit_failed = pick(0, 3) == 0 || (last && t.termination == Termination::kRenderFailureBackoff);
    }
    if (!s.edit_failed) image = digest();
    t.steps.push_back(std::move(s));
  }
  if (t.termination == Termination::kAnswered ||
      (t.termination == Termination::kMaxSteps && pick(0, 1) == 1)) {
    t.final_answer = text(pick(1, 3));
  }
  return t;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace sketchpipe::test
