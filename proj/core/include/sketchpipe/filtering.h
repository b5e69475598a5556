// SPDX-License-Identifier: Apache-2.0
//
// Dataset quality gates: consensus QA validation, img2code acceptance,
// rejection sampling, and pass@k measurement.
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/agentic_loop.h"
#include "sketchpipe/llm_gateway.h"
#include "sketchpipe/types.h"

namespace sketchpipe {

// ------------------------------------------------------------------ judging

enum class JudgeMethod { kExactNormalized, kNumericTolerance, kJudgeBackend };

std::string_view to_string(JudgeMethod m);
JudgeMethod parse_judge_method(std::string_view s);

/// Trim, case-fold, collapse whitespace, drop LaTeX inline-math wrappers
/// ($..$, $$..$$, \(..\), \[..\]) and trailing periods.
std::string normalize_answer(std::string_view s);

/// Parses a normalized answer as a decimal, scientific or a/b fraction
/// (also \frac{a}{b}), after removing any of `ignored_units` as a suffix.
std::optional<double> parse_numeric_answer(std::string_view s,
                                           const std::vector<std::string>& ignored_units = {});

/// Hook for an external judge; returns the verdict for (predicted, gold).
using JudgeHook = std::function<bool(std::string_view predicted, std::string_view gold)>;

struct JudgeConfig {
  JudgeMethod method = JudgeMethod::kExactNormalized;
  double tolerance = 1e-6;  // relative, numeric method
  std::vector<std::string> ignored_units;
  JudgeHook hook;  // judge_backend method only

  static JudgeConfig from_json(const nlohmann::json& j);
};

struct AnswerJudgment {
  std::string predicted;
  std::string gold;
  bool verdict = false;
  JudgeMethod method = JudgeMethod::kExactNormalized;
};

/// Numeric comparison falls back to the exact rule when either side does
/// not parse. Throws Error(kInvalidArgument) on empty input and
/// Error(kBackendError) for judge_backend without a hook.
bool judge_answer(std::string_view predicted, std::string_view gold, const JudgeConfig& cfg);
AnswerJudgment judge(std::string_view predicted, std::string_view gold, const JudgeConfig& cfg);

/// The answer a model committed to: text after the last line-leading
/// "FINAL ANSWER:", otherwise the whole reply trimmed.
std::string extract_final_answer(std::string_view reply);

// ---------------------------------------------------------------- decisions

enum class Decision { kKeep, kDiscard, kUndecided };
std::string_view to_string(Decision d);
Decision parse_decision(std::string_view s);

/// What a backend failure does to the instance under test.
enum class ErrorPolicy { kUndecided, kDiscard, kRetry };
ErrorPolicy parse_error_policy(std::string_view s);

struct NamedBackend {
  std::string name;
  ChatBackend* backend = nullptr;
};

struct SampleEvidence {
  std::string backend;
  int sample = 0;  // 0-based within that backend
  std::string response;
  std::string predicted;
  bool verdict = false;

  bool operator==(const SampleEvidence&) const = default;
};

struct FilterRecord {
  std::string instance_id;
  std::string filter;  // consensus | img2code | rejection
  Decision decision = Decision::kUndecided;
  std::vector<SampleEvidence> evidence;
  std::size_t calls = 0;
  std::optional<std::string> error;

  nlohmann::json to_json() const;
  static FilterRecord from_json(const nlohmann::json& j);
  bool operator==(const FilterRecord&) const = default;
};

struct FilterPrompt {
  std::string system =
      "Answer the question about the image. End with a line 'FINAL ANSWER: <answer>'.";
  std::string question = "{question}";  // {question}
};

/// Messages that ask a model to answer `instance.question` over `image_hash`.
std::vector<ChatMessage> question_messages(const VQAInstance& instance,
                                           const std::string& image_hash,
                                           const FilterPrompt& prompt);

struct FilterCommon {
  JudgeConfig judge;
  FilterPrompt prompt;
  ErrorPolicy on_error = ErrorPolicy::kUndecided;
  int max_retries = 2;  // kRetry: extra attempts per call
};

struct ConsensusConfig {
  std::vector<std::string> experts;  // backend names
  int samples_per_expert = 2;
  CompletionParams params{kSolverSamplingTemperature, 2048, 1, std::nullopt};
  bool early_exit = true;
  FilterCommon common;

  void validate() const;
  static ConsensusConfig from_json(const nlohmann::json& j);
};

/// Keep iff any of experts x samples_per_expert completions is judged
/// correct. Each sample is a separate n=1 call, issued expert by expert.
FilterRecord consensus_filter(const VQAInstance& instance,
                              const std::vector<NamedBackend>& experts,
                              const ConsensusConfig& cfg);

struct Img2CodeConfig {
  CompletionParams params{kDeterministicTemperature, 2048, 1, std::nullopt};
  bool early_exit = true;
  FilterCommon common;

  static Img2CodeConfig from_json(const nlohmann::json& j);
};

/// Each solver answers the question over the re-rendered image only; keep
/// (accept) iff any of them is correct.
FilterRecord img2code_accept(const VQAInstance& original, const std::string& rerendered_image_hash,
                             const std::vector<NamedBackend>& solvers, const Img2CodeConfig& cfg);

struct RejectionConfig {
  CompletionParams params{kDeterministicTemperature, 2048, 1, std::nullopt};
  FilterCommon common;

  static RejectionConfig from_json(const nlohmann::json& j);
};

/// One greedy answer per instance; kept iff the base model is wrong.
FilterRecord rejection_decision(const VQAInstance& instance, const NamedBackend& base,
                                const RejectionConfig& cfg);

struct RejectionResult {
  std::vector<VQAInstance> retained;  // input order preserved
  std::vector<FilterRecord> records;  // one per input instance
};

RejectionResult rejection_sample(const std::vector<VQAInstance>& instances,
                                 const NamedBackend& base, const RejectionConfig& cfg);

// ------------------------------------------------------------------- pass@k

struct QuestionSamples {
  std::string question_id;
  std::vector<bool> correct;  // per sample, in sampling order
  bool error = false;         // a backend failure occurred for this question
  std::size_t distinct_answers = 0;
};

struct PassAtKEntry {
  std::string question_id;
  int n_correct = 0;
  int k = 0;
  bool error = false;

  bool operator==(const PassAtKEntry&) const = default;
};

struct PassAtKReport {
  int k = 0;
  std::vector<PassAtKEntry> per_question;
  double aggregate = 0.0;
  std::size_t counted = 0;  // denominator

  nlohmann::json to_json() const;
};

struct PassAtKConfig {
  int k = 8;
  CompletionParams params{kSolverSamplingTemperature, 2048, 1, std::nullopt};
  JudgeConfig judge;
  bool exclude_errors = true;  // errored questions leave the denominator
  /// Count only distinct predicted answers toward n_correct. Any-of-k is
  /// unaffected because a duplicate of a correct answer is itself correct.
  bool dedup_identical = false;
  std::size_t parallelism = 1;

  static PassAtKConfig from_json(const nlohmann::json& j);
};

/// Deterministic fold over the first `j` samples of each question.
PassAtKReport fold_pass_at(const std::vector<QuestionSamples>& samples, int j,
                           bool exclude_errors = true);

/// pass@j for j = 1..k from one set of samples.
std::vector<double> pass_at_curve(const std::vector<QuestionSamples>& samples, int k,
                                  bool exclude_errors = true);

/// Produces k predicted answers for one question. Throws on backend failure.
using AnswerSampler = std::function<std::vector<std::string>(const VQAInstance&, int k)>;

/// The Solver alone: one n=k request over the instance image.
AnswerSampler solver_alone_sampler(ChatBackend& solver, CompletionParams params,
                                   FilterPrompt prompt = {});

/// The Solver inside the agentic loop: k independent episodes, each
/// contributing its final answer (empty when the episode gave none).
AnswerSampler agentic_sampler(ChatBackend& solver, ChatBackend& editor, Renderer& renderer,
                              const BlobStore& blobs, EpisodeConfig episode);

PassAtKReport pass_at_k(const std::vector<VQAInstance>& questions, const AnswerSampler& sampler,
                        const PassAtKConfig& cfg,
                        std::vector<QuestionSamples>* samples_out = nullptr);

}  // namespace sketchpipe
