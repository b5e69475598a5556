// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sketchpipe/renderer.h"
#include "sketchpipe/types.h"

namespace sketchpipe::test {

/// Removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// PNG signature followed by `payload`; enough for the container sniffer.
std::vector<std::uint8_t> png_bytes(std::string_view payload);

/// Digest the store assigns to png_bytes(payload).
std::string png_digest(std::string_view payload);

/// In-process renderer keyed on the program text:
///   "FAIL:..."   runtime error
///   "SYNTAX:..." syntax error
///   "EMPTY..."   empty output
///   otherwise    ok, image = png_bytes(program)
class FakeRenderer : public Renderer {
 public:
  RenderOutcome render(const RenderSpec& spec) override;
  int calls() const { return calls_.load(); }

 private:
  std::atomic<int> calls_{0};
};

/// Policy with one "sh" profile that runs the program as a shell script
/// with the output path in $1.
SandboxPolicy sh_policy(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));

/// Shell program that writes png_bytes(payload) to "$1". `payload` must be
/// free of quotes and backslashes.
std::string png_script(std::string_view payload);

VQAInstance make_instance(std::string id, std::string code, std::string question = "How many bars?",
                          std::string answer = "4");

/// Random valid trajectory; image hashes are fresh hex digests.
Trajectory random_trajectory(std::mt19937_64& rng, const std::string& id,
                             const std::string& instance_id);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::string_view text);

}  // namespace sketchpipe::test
