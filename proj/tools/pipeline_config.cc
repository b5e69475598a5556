// SPDX-License-Identifier: Apache-2.0
#include "pipeline_config.h"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "sketchpipe/error.h"

namespace sketchpipe::cli {

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kConfig, what); }

std::string env_or(const nlohmann::json& spec, const char* value_key, const char* env_key) {
  if (spec.contains(env_key)) {
    const auto var = spec.at(env_key).get<std::string>();
    if (const char* v = std::getenv(var.c_str()); v != nullptr && *v != '\0') return v;
    if (!spec.contains(value_key)) config_error("environment variable " + var + " is not set");
  }
  return spec.value(value_key, "");
}

}  // namespace

std::filesystem::path PipelineConfig::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) config_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    config_error("config " + path.string() + ": " + e.what());
  }
  return from_json(j, std::filesystem::absolute(path).parent_path());
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, std::filesystem::path base_dir) {
  PipelineConfig c;
  c.base_dir = std::move(base_dir);
  try {
    const nlohmann::json backends = j.value("backends", nlohmann::json::object());
    for (const auto& [name, spec] : backends.items()) {
      c.backends[name] = BackendSpec{spec.at("kind").get<std::string>(), spec};
    }
    if (j.contains("roles")) {
      c.solver_backend = j.at("roles").value("solver", c.solver_backend);
      c.editor_backend = j.at("roles").value("editor", c.editor_backend);
    }
    c.renderer = SandboxPolicy::from_json(j.value("renderer", nlohmann::json::object()));
    if (j.contains("episode")) c.episode = EpisodeConfig::from_json(j.at("episode"));
    c.filter = j.value("filter", nlohmann::json::object());
    if (j.contains("trainset")) {
      c.trainset = TrainsetConfig::from_json(j.at("trainset"));
      c.phase = parse_train_phase(j.at("trainset").value("phase", "phase1"));
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      c.store = p.value("store", c.store.string());
      c.out = p.value("out", c.out.string());
      c.instances = p.value("instances", c.instances.string());
      if (p.contains("taxonomy")) c.taxonomy = p.at("taxonomy").get<std::string>();
    }
    c.parallelism = j.value("parallelism", c.parallelism);
  } catch (const nlohmann::json::exception& e) {
    config_error(std::string("config: ") + e.what());
  }
  if (c.parallelism == 0) config_error("parallelism must be >= 1");

  static const std::vector<std::string> kKinds{"scripted", "http_openai_compatible", "recording"};
  for (const auto& [name, spec] : c.backends) {
    if (std::find(kKinds.begin(), kKinds.end(), spec.kind) == kKinds.end()) {
      config_error("backend '" + name + "' has unknown kind '" + spec.kind + "'");
    }
    if (spec.kind == "recording") {
      const auto inner = spec.raw.value("inner", "");
      if (!c.backends.count(inner)) config_error("recording backend '" + name + "' wraps unknown '" + inner + "'");
      if (inner == name) config_error("recording backend '" + name + "' wraps itself");
    }
  }
  return c;
}

BackendRegistry::BackendRegistry(const PipelineConfig& cfg, const BlobStore& blobs)
    : cfg_(cfg), blobs_(blobs) {}

bool BackendRegistry::scripted(const std::string& name) const {
  const auto it = cfg_.backends.find(name);
  if (it == cfg_.backends.end()) return false;
  if (it->second.kind == "scripted") return true;
  if (it->second.kind == "recording") return scripted(it->second.raw.value("inner", ""));
  return false;
}

std::shared_ptr<ChatBackend> BackendRegistry::get(const std::string& name) {
  if (auto it = cache_.find(name); it != cache_.end()) return it->second;
  const auto it = cfg_.backends.find(name);
  if (it == cfg_.backends.end()) config_error("unknown backend '" + name + "'");
  const nlohmann::json& spec = it->second.raw;
  std::shared_ptr<ChatBackend> backend;
  try {
    if (it->second.kind == "scripted") {
      ScriptedBackend::Options opts;
      opts.strict = spec.value("strict", false);
      backend = ScriptedBackend::from_file(cfg_.resolve(spec.at("transcript").get<std::string>()), opts);
    } else if (it->second.kind == "recording") {
      backend = std::make_shared<RecordingBackend>(get(spec.at("inner").get<std::string>()),
                                                   cfg_.resolve(spec.at("sink").get<std::string>()));
    } else {
      HttpBackendConfig hc;
      hc.base_url = env_or(spec, "base_url", "base_url_env");
      hc.model = spec.at("model").get<std::string>();
      hc.api_key = env_or(spec, "api_key", "api_key_env");
      if (hc.base_url.empty()) config_error("backend '" + name + "' has no base_url");
      if (spec.contains("timeout_ms")) hc.request_timeout = std::chrono::milliseconds(spec.at("timeout_ms").get<long>());
      hc.max_in_flight = spec.value("max_in_flight", hc.max_in_flight);
      if (spec.contains("retry")) {
        const auto& r = spec.at("retry");
        hc.retry.max_attempts = r.value("max_attempts", hc.retry.max_attempts);
        if (r.contains("initial_delay_ms")) hc.retry.initial_delay = std::chrono::milliseconds(r.at("initial_delay_ms").get<long>());
        hc.retry.multiplier = r.value("multiplier", hc.retry.multiplier);
        if (r.contains("max_delay_ms")) hc.retry.max_delay = std::chrono::milliseconds(r.at("max_delay_ms").get<long>());
      }
      const BlobStore* blobs = &blobs_;
      hc.resolve_blob = [blobs](std::string_view digest) { return blobs->get(digest); };
      backend = std::make_shared<HttpChatBackend>(std::move(hc));
    }
  } catch (const nlohmann::json::exception& e) {
    config_error("backend '" + name + "': " + e.what());
  }
  cache_[name] = backend;
  return backend;
}

std::vector<VQAInstance> read_instances(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read instances " + path.string());
  std::vector<VQAInstance> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kCorruptRecord, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
    for (const auto& r : rows) out << r.dump() << "\n";
    if (!out.flush()) throw Error(ErrorCode::kIo, "short write to " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace sketchpipe::cli
