// SPDX-License-Identifier: Apache-2.0
//
// Line-delimited JSON logging on stderr.
#pragma once

#include <string_view>

#include <nlohmann/json.hpp>

namespace sketchpipe::log {

enum class Level { kDebug, kInfo, kWarn, kError };

void set_min_level(Level level);
void emit(Level level, std::string_view message, nlohmann::json fields = {});

inline void debug(std::string_view m, nlohmann::json f = {}) { emit(Level::kDebug, m, std::move(f)); }
inline void info(std::string_view m, nlohmann::json f = {}) { emit(Level::kInfo, m, std::move(f)); }
inline void warn(std::string_view m, nlohmann::json f = {}) { emit(Level::kWarn, m, std::move(f)); }
inline void error(std::string_view m, nlohmann::json f = {}) { emit(Level::kError, m, std::move(f)); }

}  // namespace sketchpipe::log
