// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace sketchpipe::cli {

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Entry point shared by the binary and the tests. Data goes to stdout and
/// files, JSON-lines logs to stderr.
int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace sketchpipe::cli
