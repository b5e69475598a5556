// SPDX-License-Identifier: Apache-2.0
//
// Scripted episode scenarios with hand-written golden trajectories and call
// sequences. Shared by the unit tests and the acceptance binary.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sketchpipe/agentic_loop.h"
#include "sketchpipe/types.h"

namespace sketchpipe::test {

struct GoldenStep {
  std::string reasoning;
  std::optional<std::string> action;
  bool edit_failed = false;
  std::string image_program;  // the program whose fake render is shown at this step
};

struct Scenario {
  std::string name;
  EpisodeConfig config;
  std::string initial_program;
  std::vector<std::string> solver_replies;
  std::vector<std::string> editor_replies;

  std::vector<std::string> calls;
  std::vector<GoldenStep> steps;
  Termination termination = Termination::kAnswered;
  std::optional<std::string> final_answer;
  int reprompts = 0;
  int revisions = 0;
};

std::vector<Scenario> agentic_scenarios();

/// Golden trajectory with image digests filled in from the fake renderer.
Trajectory golden_trajectory(const Scenario& s);

/// Runs the scenario in a fresh temp store. Returns an empty string when the
/// trajectory, call sequence, counters and transcript consumption all match;
/// otherwise a description of the first mismatch.
std::string check_scenario(const Scenario& s);

}  // namespace sketchpipe::test
