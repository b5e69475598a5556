// SPDX-License-Identifier: Apache-2.0
//
// JSON pipeline configuration and the backend registry built from it.
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/agentic_loop.h"
#include "sketchpipe/datastore.h"
#include "sketchpipe/filtering.h"
#include "sketchpipe/llm_gateway.h"
#include "sketchpipe/renderer.h"
#include "sketchpipe/trainset.h"

namespace sketchpipe::cli {

struct BackendSpec {
  std::string kind;  // scripted | http_openai_compatible | recording
  nlohmann::json raw;
};

struct PipelineConfig {
  std::filesystem::path base_dir;  // relative paths resolve here
  std::map<std::string, BackendSpec> backends;
  std::string solver_backend = "solver";
  std::string editor_backend = "editor";
  SandboxPolicy renderer;
  EpisodeConfig episode;
  nlohmann::json filter = nlohmann::json::object();
  TrainsetConfig trainset;
  TrainPhase phase = TrainPhase::kPhase1;
  std::filesystem::path store = "store";
  std::filesystem::path out = "out";
  std::filesystem::path instances = "instances.jsonl";
  std::optional<std::filesystem::path> taxonomy;
  std::size_t parallelism = 1;

  std::filesystem::path resolve(const std::filesystem::path& p) const;

  /// Throws Error(kConfig) for malformed files or dangling backend names.
  static PipelineConfig load(const std::filesystem::path& path);
  static PipelineConfig from_json(const nlohmann::json& j, std::filesystem::path base_dir);
};

/// Lazily constructs backends by name; the same name yields the same object.
class BackendRegistry {
 public:
  BackendRegistry(const PipelineConfig& cfg, const BlobStore& blobs);

  std::shared_ptr<ChatBackend> get(const std::string& name);
  /// True when `name` (or a backend it wraps) replays a transcript.
  bool scripted(const std::string& name) const;
  std::size_t created() const { return cache_.size(); }

 private:
  const PipelineConfig& cfg_;
  const BlobStore& blobs_;
  std::map<std::string, std::shared_ptr<ChatBackend>> cache_;
};

std::vector<VQAInstance> read_instances(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

}  // namespace sketchpipe::cli
