// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/log.h"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>

namespace sketchpipe::log {

namespace {
std::atomic<Level> g_min_level{Level::kInfo};
std::mutex g_mu;

const char* level_name(Level l) {
  switch (l) {
    case Level::kDebug: return "debug";
    case Level::kInfo: return "info";
    case Level::kWarn: return "warn";
    case Level::kError: return "error";
  }
  return "info";
}
}  // namespace

void set_min_level(Level level) { g_min_level = level; }

void emit(Level level, std::string_view message, nlohmann::json fields) {
  if (level < g_min_level.load()) return;
  nlohmann::json rec = nlohmann::json::object();
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  rec["ts_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  rec["level"] = level_name(level);
  rec["msg"] = std::string(message);
  if (fields.is_object()) {
    for (auto& [k, v] : fields.items()) rec[k] = v;
  }
  const std::string line = rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  std::lock_guard lock(g_mu);
  std::fwrite(line.data(), 1, line.size(), stderr);
}

}  // namespace sketchpipe::log
