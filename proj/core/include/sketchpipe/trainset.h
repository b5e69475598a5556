// SPDX-License-Identifier: Apache-2.0
//
// Trajectories -> interleaved training examples with supervision masks.
//
// An example is a list of role-annotated spans; each span expands to
// n_tokens positions. Images appear as
//   vision_start, image_embedding x image_tokens, vision_end
// and are referenced by digest, never inlined.
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/agentic_loop.h"
#include "sketchpipe/types.h"

namespace sketchpipe {

enum class TokenRole {
  kUserText,
  kAssistantText,
  kVisionStart,
  kVisionEnd,
  kImageEmbedding,
  kToolCallOpen,
  kToolCallClose,
};

std::string_view to_string(TokenRole r);
TokenRole parse_token_role(std::string_view s);

enum class TrainPhase { kPhase1, kPhase2 };
std::string_view to_string(TrainPhase p);
TrainPhase parse_train_phase(std::string_view s);

struct TokenSpan {
  TokenRole role = TokenRole::kUserText;
  std::string text;          // text roles and delimiters
  std::string image_digest;  // image_embedding only
  std::size_t n_tokens = 0;

  bool operator==(const TokenSpan&) const = default;
};

struct MaskStats {
  std::size_t supervised = 0;
  std::size_t total = 0;
  std::map<TokenRole, std::size_t> per_role;
};

struct MaskResult {
  std::vector<bool> mask;
  /// segments[t]: supervised positions after image t and before image t+1.
  std::vector<std::vector<std::size_t>> segments;
  MaskStats stats;
};

struct TrainingExample {
  std::string trajectory_id;
  std::vector<TokenSpan> spans;
  std::vector<std::string> image_refs;  // digests in sequence order
  TrainPhase phase = TrainPhase::kPhase1;
  std::vector<bool> mask;  // empty until build_mask has been applied
  std::vector<std::vector<std::size_t>> segments;

  /// Role of every position.
  std::vector<TokenRole> roles() const;
  std::size_t size() const;

  bool operator==(const TrainingExample&) const = default;
};

using TokenCounter = std::function<std::size_t(std::string_view)>;

/// Whitespace-separated words; the default when no tokenizer is configured.
std::size_t count_words(std::string_view text);

struct TrainsetConfig {
  std::size_t image_tokens = 64;  // embedding positions per image
  TokenCounter counter = count_words;
  bool include_system_prompt = false;
  std::string failure_notice_reason = "the edit could not be rendered";

  static TrainsetConfig from_json(const nlohmann::json& j);
};

/// Builds the interleaved sequence for an answered (or forced-answer)
/// trajectory. Environment-injected text (question, failure notices,
/// force-answer prompt) is user_text. Throws Error(kInvalidArgument) for
/// trajectories without a final answer and Error(kInvariantViolation) for
/// invalid ones.
TrainingExample standardize(const Trajectory& t, const VQAInstance& instance,
                            const PromptTemplates& templates, const TrainsetConfig& cfg = {});

/// Supervises assistant text, tool-call delimiters and vision boundaries the
/// assistant emitted (a boundary whose image follows assistant or tool-call
/// tokens). Image embeddings and user text are never supervised. Throws
/// Error(kInvalidArgument) on an unbracketed embedding run or a supervised
/// position before the first image.
MaskResult build_mask(std::span<const TokenRole> roles);
MaskResult build_mask(const TrainingExample& e, TrainPhase phase);

/// Stores the mask and segments in the example.
void apply_mask(TrainingExample& e, TrainPhase phase);

struct LossWeights {
  double normalizer = 0.0;              // 1 / sum_i |S^(i)|
  std::vector<std::size_t> supervised;  // |S^(i)| per example
};

/// Throws Error(kEmptyInput, "no supervised tokens") when the corpus has none.
LossWeights aggregate_loss_weights(const std::vector<TrainingExample>& examples);

/// Run-length encoding of the true positions as [start, length] pairs.
std::vector<std::pair<std::size_t, std::size_t>> mask_runs(const std::vector<bool>& mask);

nlohmann::json to_json(const TrainingExample& e);
TrainingExample training_example_from_json(const nlohmann::json& j);

}  // namespace sketchpipe
