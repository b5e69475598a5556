// SPDX-License-Identifier: Apache-2.0
//
// Runtime self-checks for the editor kernel: finite-difference gradient
// verification, zero-init identity and the pooling bin oracle.
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "sketchpipe/editor_kernel.h"

namespace sketchpipe::kernel {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for |a - n| / max(|a|, |n|, floor). Entries whose
  /// true gradient is below this are compared in absolute terms.
  double floor = 1e-6;
  double kink = 1e-8;  // residual magnitude treated as sitting on |x|'s kink
  /// Test hook: scales one analytic entry to prove the checker bites.
  bool corrupt_gradient = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_entry;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  bool pass = false;

  nlohmann::json to_json() const;
};

/// Compares backward() against central differences of l1_loss for every
/// parameter entry and every entry of E_act and E_V.
GradCheckReport gradient_check(const EditorParams& params, const Mat& e_v, const Mat& e_act,
                               const Mat& target, const GradCheckOptions& opts = {});

struct RandomProblem {
  EditorParams params;
  Mat e_v, e_act, target;
};

/// D <= 16, K <= 8, L <= 2, heads <= 4, every weight (including W_O and W_2)
/// random so no path is trivially zero.
RandomProblem random_problem(std::mt19937_64& rng);

struct SelfcheckOptions {
  int gradient_configs = 20;
  std::uint64_t seed = 20240601;
  GradCheckOptions grad;
};

/// {"identity":..,"pooling":..,"gradient":..,"pass":bool}
nlohmann::json run_selfcheck(const SelfcheckOptions& opts = {});

}  // namespace sketchpipe::kernel
