// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/filtering.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <future>
#include <regex>
#include <set>

#include "sketchpipe/error.h"
#include "sketchpipe/log.h"
#include "sketchpipe/thread_pool.h"

namespace sketchpipe {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool strip_wrapper(std::string_view& s, std::string_view open, std::string_view close) {
  if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
    s = trim(s.substr(open.size(), s.size() - open.size() - close.size()));
    return true;
  }
  return false;
}

std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

bool is_backend_failure(const Error& e) {
  return e.code() == ErrorCode::kBackendError || e.code() == ErrorCode::kTranscriptMismatch;
}

std::string call_once(ChatBackend& backend, const std::vector<ChatMessage>& messages,
                      CompletionParams params, const FilterCommon& common, std::size_t& calls) {
  params.n_samples = 1;
  for (int attempt = 0;; ++attempt) {
    ++calls;
    try {
      return backend.complete(messages, params, RoleTag::kSolver).at(0).text_content();
    } catch (const Error& e) {
      if (!is_backend_failure(e) || common.on_error != ErrorPolicy::kRetry ||
          attempt >= common.max_retries) {
        throw;
      }
      log::warn("filter call failed; retrying", {{"attempt", attempt}, {"error", e.what()}});
    }
  }
}

SampleEvidence score(const std::string& backend, int sample, std::string response,
                     const std::string& gold, const JudgeConfig& judge_cfg) {
  SampleEvidence ev;
  ev.backend = backend;
  ev.sample = sample;
  ev.predicted = extract_final_answer(response);
  ev.response = std::move(response);
  ev.verdict = !ev.predicted.empty() && judge_answer(ev.predicted, gold, judge_cfg);
  return ev;
}

void apply_error_policy(FilterRecord& rec, const Error& e, const FilterCommon& common) {
  rec.error = e.what();
  rec.decision = common.on_error == ErrorPolicy::kDiscard ? Decision::kDiscard
                                                          : Decision::kUndecided;
}

// Shared body of consensus and img2code: keep iff any sample is correct.
FilterRecord any_of(const std::string& filter, const VQAInstance& instance,
                    const std::string& image_hash, const std::vector<NamedBackend>& backends,
                    int samples_each, const CompletionParams& params, bool early_exit,
                    const FilterCommon& common) {
  FilterRecord rec;
  rec.instance_id = instance.id;
  rec.filter = filter;
  const auto messages = question_messages(instance, image_hash, common.prompt);
  bool any = false;
  try {
    for (const auto& nb : backends) {
      if (nb.backend == nullptr) {
        throw Error(ErrorCode::kConfig, "backend '" + nb.name + "' is not configured");
      }
      for (int s = 0; s < samples_each; ++s) {
        std::string reply = call_once(*nb.backend, messages, params, common, rec.calls);
        rec.evidence.push_back(score(nb.name, s, std::move(reply), instance.answer, common.judge));
        any = any || rec.evidence.back().verdict;
        if (any && early_exit) {
          rec.decision = Decision::kKeep;
          return rec;
        }
      }
    }
  } catch (const Error& e) {
    if (!is_backend_failure(e)) throw;
    if (any) {
      rec.decision = Decision::kKeep;
      rec.error = e.what();
    } else {
      apply_error_policy(rec, e, common);
    }
    return rec;
  }
  rec.decision = any ? Decision::kKeep : Decision::kDiscard;
  return rec;
}

FilterCommon common_from_json(const nlohmann::json& j) {
  FilterCommon c;
  if (j.contains("judge")) c.judge = JudgeConfig::from_json(j.at("judge"));
  if (j.contains("on_error")) c.on_error = parse_error_policy(j.at("on_error").get<std::string>());
  c.max_retries = j.value("max_retries", c.max_retries);
  if (j.contains("prompt")) {
    const auto& p = j.at("prompt");
    c.prompt.system = p.value("system", c.prompt.system);
    c.prompt.question = p.value("question", c.prompt.question);
  }
  return c;
}

template <typename F>
auto config_guard(const char* what, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string(what) + ": " + e.what());
  }
}

}  // namespace

// ------------------------------------------------------------------ judging

std::string_view to_string(JudgeMethod m) {
  switch (m) {
    case JudgeMethod::kExactNormalized: return "exact_normalized";
    case JudgeMethod::kNumericTolerance: return "numeric_tolerance";
    case JudgeMethod::kJudgeBackend: return "judge_backend";
  }
  return "exact_normalized";
}

JudgeMethod parse_judge_method(std::string_view s) {
  if (s == "exact_normalized") return JudgeMethod::kExactNormalized;
  if (s == "numeric_tolerance") return JudgeMethod::kNumericTolerance;
  if (s == "judge_backend") return JudgeMethod::kJudgeBackend;
  throw Error(ErrorCode::kConfig, "unknown judge method '" + std::string(s) + "'");
}

std::string normalize_answer(std::string_view s) {
  s = trim(s);
  for (bool changed = true; changed;) {
    changed = false;
    while (!s.empty() && s.back() == '.') {
      s = trim(s.substr(0, s.size() - 1));
      changed = true;
    }
    changed = strip_wrapper(s, "$$", "$$") || strip_wrapper(s, "$", "$") ||
              strip_wrapper(s, "\\(", "\\)") || strip_wrapper(s, "\\[", "\\]") || changed;
  }
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (const char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::optional<double> parse_numeric_answer(std::string_view s,
                                           const std::vector<std::string>& ignored_units) {
  std::string text = normalize_answer(s);
  for (const auto& unit : ignored_units) {
    const std::string u = normalize_answer(unit);
    if (!u.empty() && text.size() > u.size() && text.ends_with(u)) {
      text = std::string(trim(std::string_view(text).substr(0, text.size() - u.size())));
      break;
    }
  }
  static const std::regex kFrac(R"(^\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}$)");
  static const std::regex kThousands(R"(^-?\d{1,3}(,\d{3})+(\.\d+)?$)");
  std::smatch m;
  if (std::regex_match(text, m, kFrac)) text = m[1].str() + "/" + m[2].str();
  if (std::regex_match(text, kThousands)) std::erase(text, ',');

  const auto slash = text.find('/');
  if (slash == std::string::npos) return parse_double(text);
  const auto num = parse_double(std::string_view(text).substr(0, slash));
  const auto den = parse_double(std::string_view(text).substr(slash + 1));
  if (!num || !den || *den == 0.0) return std::nullopt;
  return *num / *den;
}

JudgeConfig JudgeConfig::from_json(const nlohmann::json& j) {
  return config_guard("judge config", [&] {
    JudgeConfig c;
    if (j.contains("method")) c.method = parse_judge_method(j.at("method").get<std::string>());
    c.tolerance = j.value("tolerance", c.tolerance);
    c.ignored_units = j.value("ignored_units", c.ignored_units);
    if (c.tolerance < 0) throw Error(ErrorCode::kConfig, "judge tolerance must be >= 0");
    return c;
  });
}

bool judge_answer(std::string_view predicted, std::string_view gold, const JudgeConfig& cfg) {
  if (trim(predicted).empty() || trim(gold).empty()) {
    throw Error(ErrorCode::kInvalidArgument, "judge_answer needs non-empty texts");
  }
  switch (cfg.method) {
    case JudgeMethod::kJudgeBackend:
      if (!cfg.hook) throw Error(ErrorCode::kBackendError, "judge_backend method has no backend");
      return cfg.hook(predicted, gold);
    case JudgeMethod::kNumericTolerance: {
      const auto a = parse_numeric_answer(predicted, cfg.ignored_units);
      const auto b = parse_numeric_answer(gold, cfg.ignored_units);
      if (a && b) {
        return *a == *b || std::abs(*a - *b) <= cfg.tolerance * std::max(std::abs(*a), std::abs(*b));
      }
      break;
    }
    case JudgeMethod::kExactNormalized:
      break;
  }
  return normalize_answer(predicted) == normalize_answer(gold);
}

AnswerJudgment judge(std::string_view predicted, std::string_view gold, const JudgeConfig& cfg) {
  return AnswerJudgment{std::string(predicted), std::string(gold),
                        judge_answer(predicted, gold, cfg), cfg.method};
}

std::string extract_final_answer(std::string_view reply) {
  std::optional<std::size_t> last;
  std::size_t line_start = 0;
  while (line_start < reply.size()) {
    const auto lead = reply.find_first_not_of(" \t", line_start);
    if (lead != std::string_view::npos && reply.substr(lead).starts_with(kAnswerDelimiter)) {
      last = lead;
    }
    const auto nl = reply.find('\n', line_start);
    if (nl == std::string_view::npos) break;
    line_start = nl + 1;
  }
  if (!last) return std::string(trim(reply));
  return std::string(trim(reply.substr(*last + kAnswerDelimiter.size())));
}

// ---------------------------------------------------------------- decisions

std::string_view to_string(Decision d) {
  switch (d) {
    case Decision::kKeep: return "keep";
    case Decision::kDiscard: return "discard";
    case Decision::kUndecided: return "undecided";
  }
  return "undecided";
}

Decision parse_decision(std::string_view s) {
  if (s == "keep") return Decision::kKeep;
  if (s == "discard") return Decision::kDiscard;
  if (s == "undecided") return Decision::kUndecided;
  throw Error(ErrorCode::kCorruptRecord, "unknown decision '" + std::string(s) + "'");
}

ErrorPolicy parse_error_policy(std::string_view s) {
  if (s == "undecided") return ErrorPolicy::kUndecided;
  if (s == "discard") return ErrorPolicy::kDiscard;
  if (s == "retry") return ErrorPolicy::kRetry;
  throw Error(ErrorCode::kConfig, "unknown error policy '" + std::string(s) + "'");
}

nlohmann::json FilterRecord::to_json() const {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : evidence) {
    ev.push_back({{"backend", e.backend},
                  {"sample", e.sample},
                  {"response", e.response},
                  {"predicted", e.predicted},
                  {"verdict", e.verdict}});
  }
  return {{"instance_id", instance_id},
          {"filter", filter},
          {"decision", std::string(to_string(decision))},
          {"calls", calls},
          {"error", error ? nlohmann::json(*error) : nlohmann::json(nullptr)},
          {"evidence", std::move(ev)}};
}

FilterRecord FilterRecord::from_json(const nlohmann::json& j) {
  try {
    FilterRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.filter = j.at("filter").get<std::string>();
    r.decision = parse_decision(j.at("decision").get<std::string>());
    r.calls = j.at("calls").get<std::size_t>();
    if (!j.at("error").is_null()) r.error = j.at("error").get<std::string>();
    for (const auto& e : j.at("evidence")) {
      r.evidence.push_back({e.at("backend").get<std::string>(), e.at("sample").get<int>(),
                            e.at("response").get<std::string>(),
                            e.at("predicted").get<std::string>(), e.at("verdict").get<bool>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptRecord, std::string("filter record: ") + e.what());
  }
}

std::vector<ChatMessage> question_messages(const VQAInstance& instance,
                                           const std::string& image_hash,
                                           const FilterPrompt& prompt) {
  if (image_hash.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "instance " + instance.id + " has no rendered image");
  }
  std::vector<ChatMessage> messages;
  if (!prompt.system.empty()) messages.push_back(ChatMessage::text(ChatRole::kSystem, prompt.system));
  messages.push_back(ChatMessage{
      ChatRole::kUser,
      {ContentPart::of_image(image_hash),
       ContentPart::of_text(fill_template(prompt.question, {{"question", instance.question}}))}});
  return messages;
}

void ConsensusConfig::validate() const {
  if (experts.empty()) throw Error(ErrorCode::kConfig, "consensus needs at least one expert");
  if (samples_per_expert < 1) throw Error(ErrorCode::kConfig, "samples_per_expert must be >= 1");
  params.validate();
}

ConsensusConfig ConsensusConfig::from_json(const nlohmann::json& j) {
  auto c = config_guard("consensus config", [&] {
    ConsensusConfig c;
    c.experts = j.value("experts", c.experts);
    c.samples_per_expert = j.value("samples_per_expert", c.samples_per_expert);
    if (j.contains("params")) c.params = CompletionParams::from_json(j.at("params"), c.params);
    c.early_exit = j.value("early_exit", c.early_exit);
    c.common = common_from_json(j);
    return c;
  });
  c.validate();
  return c;
}

FilterRecord consensus_filter(const VQAInstance& instance,
                              const std::vector<NamedBackend>& experts,
                              const ConsensusConfig& cfg) {
  cfg.validate();
  if (experts.size() != cfg.experts.size()) {
    throw Error(ErrorCode::kConfig, "consensus expert list does not match configured experts");
  }
  return any_of("consensus", instance, instance.image_hash, experts, cfg.samples_per_expert,
                cfg.params, cfg.early_exit, cfg.common);
}

Img2CodeConfig Img2CodeConfig::from_json(const nlohmann::json& j) {
  return config_guard("img2code config", [&] {
    Img2CodeConfig c;
    if (j.contains("params")) c.params = CompletionParams::from_json(j.at("params"), c.params);
    c.early_exit = j.value("early_exit", c.early_exit);
    c.common = common_from_json(j);
    return c;
  });
}

FilterRecord img2code_accept(const VQAInstance& original, const std::string& rerendered_image_hash,
                             const std::vector<NamedBackend>& solvers, const Img2CodeConfig& cfg) {
  if (solvers.empty()) throw Error(ErrorCode::kConfig, "img2code needs at least one solver");
  return any_of("img2code", original, rerendered_image_hash, solvers, 1, cfg.params,
                cfg.early_exit, cfg.common);
}

RejectionConfig RejectionConfig::from_json(const nlohmann::json& j) {
  return config_guard("rejection config", [&] {
    RejectionConfig c;
    if (j.contains("params")) c.params = CompletionParams::from_json(j.at("params"), c.params);
    c.common = common_from_json(j);
    return c;
  });
}

FilterRecord rejection_decision(const VQAInstance& instance, const NamedBackend& base,
                                const RejectionConfig& cfg) {
  CompletionParams params = cfg.params;
  params.temperature = kDeterministicTemperature;
  // The base model being right means the instance is too easy: invert.
  FilterRecord rec =
      any_of("rejection", instance, instance.image_hash, {base}, 1, params, true, cfg.common);
  if (!rec.error) rec.decision = rec.decision == Decision::kKeep ? Decision::kDiscard : Decision::kKeep;
  return rec;
}

RejectionResult rejection_sample(const std::vector<VQAInstance>& instances,
                                 const NamedBackend& base, const RejectionConfig& cfg) {
  RejectionResult out;
  for (const auto& inst : instances) {
    out.records.push_back(rejection_decision(inst, base, cfg));
    if (out.records.back().decision == Decision::kKeep) out.retained.push_back(inst);
  }
  return out;
}

// ------------------------------------------------------------------- pass@k

nlohmann::json PassAtKReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& q : per_question) {
    rows.push_back({{"question_id", q.question_id},
                    {"n_correct", q.n_correct},
                    {"k", q.k},
                    {"error", q.error}});
  }
  return {{"k", k}, {"aggregate", aggregate}, {"counted", counted}, {"per_question", rows}};
}

PassAtKConfig PassAtKConfig::from_json(const nlohmann::json& j) {
  return config_guard("pass@k config", [&] {
    PassAtKConfig c;
    c.k = j.value("k", c.k);
    if (j.contains("params")) c.params = CompletionParams::from_json(j.at("params"), c.params);
    if (j.contains("judge")) c.judge = JudgeConfig::from_json(j.at("judge"));
    c.exclude_errors = j.value("exclude_errors", c.exclude_errors);
    c.dedup_identical = j.value("dedup_identical", c.dedup_identical);
    c.parallelism = j.value("parallelism", c.parallelism);
    if (c.k < 1) throw Error(ErrorCode::kConfig, "k must be >= 1");
    return c;
  });
}

PassAtKReport fold_pass_at(const std::vector<QuestionSamples>& samples, int j,
                           bool exclude_errors) {
  if (j < 1) throw Error(ErrorCode::kInvalidArgument, "pass@j needs j >= 1");
  PassAtKReport report;
  report.k = j;
  std::size_t hits = 0;
  for (const auto& q : samples) {
    PassAtKEntry e{q.question_id, 0, j, q.error};
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(j), q.correct.size());
    for (std::size_t i = 0; i < n; ++i) e.n_correct += q.correct[i] ? 1 : 0;
    if (!(q.error && exclude_errors)) {
      ++report.counted;
      hits += e.n_correct >= 1 ? 1 : 0;
    }
    report.per_question.push_back(std::move(e));
  }
  report.aggregate =
      report.counted == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(report.counted);
  return report;
}

std::vector<double> pass_at_curve(const std::vector<QuestionSamples>& samples, int k,
                                  bool exclude_errors) {
  std::vector<double> curve;
  for (int j = 1; j <= k; ++j) curve.push_back(fold_pass_at(samples, j, exclude_errors).aggregate);
  return curve;
}

AnswerSampler solver_alone_sampler(ChatBackend& solver, CompletionParams params,
                                   FilterPrompt prompt) {
  return [&solver, params, prompt](const VQAInstance& inst, int k) {
    CompletionParams p = params;
    p.n_samples = k;
    const auto replies =
        complete_texts(solver, question_messages(inst, inst.image_hash, prompt), p, RoleTag::kSolver);
    std::vector<std::string> answers;
    for (const auto& r : replies) answers.push_back(extract_final_answer(r));
    return answers;
  };
}

AnswerSampler agentic_sampler(ChatBackend& solver, ChatBackend& editor, Renderer& renderer,
                              const BlobStore& blobs, EpisodeConfig episode) {
  return [&solver, &editor, &renderer, &blobs, episode](const VQAInstance& inst, int k) {
    std::vector<std::string> answers;
    for (int i = 0; i < k; ++i) {
      EpisodeResult r = run_episode(inst, solver, editor, renderer, blobs, episode,
                                    "passk-" + inst.id + "-" + std::to_string(i));
      if (r.trajectory.termination == Termination::kBackendError) {
        throw Error(ErrorCode::kBackendError, "episode " + r.trajectory.id + " hit a backend error");
      }
      answers.push_back(r.trajectory.final_answer.value_or(""));
    }
    return answers;
  };
}

PassAtKReport pass_at_k(const std::vector<VQAInstance>& questions, const AnswerSampler& sampler,
                        const PassAtKConfig& cfg, std::vector<QuestionSamples>* samples_out) {
  if (cfg.k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  auto run_one = [&](const VQAInstance& inst) {
    QuestionSamples q;
    q.question_id = inst.id;
    std::vector<std::string> answers;
    try {
      answers = sampler(inst, cfg.k);
    } catch (const Error& e) {
      if (!is_backend_failure(e)) throw;
      q.error = true;
      return q;
    }
    if (answers.size() != static_cast<std::size_t>(cfg.k)) {
      throw Error(ErrorCode::kInvariantViolation, "sampler returned " +
                                                      std::to_string(answers.size()) +
                                                      " answers for k=" + std::to_string(cfg.k));
    }
    std::set<std::string> seen;
    for (const auto& a : answers) {
      const std::string norm = normalize_answer(a);
      const bool fresh = seen.insert(norm).second;
      const bool correct = !norm.empty() && judge_answer(a, inst.answer, cfg.judge);
      q.correct.push_back(correct && (fresh || !cfg.dedup_identical));
    }
    q.distinct_answers = seen.size();
    return q;
  };

  std::vector<QuestionSamples> samples;
  samples.reserve(questions.size());
  if (cfg.parallelism <= 1) {
    for (const auto& inst : questions) samples.push_back(run_one(inst));
  } else {
    ThreadPool pool(cfg.parallelism);
    std::vector<std::future<QuestionSamples>> futures;
    for (const auto& inst : questions) futures.push_back(pool.submit([&, &inst = inst] { return run_one(inst); }));
    for (auto& f : futures) samples.push_back(f.get());
  }
  PassAtKReport report = fold_pass_at(samples, cfg.k, cfg.exclude_errors);
  if (samples_out) *samples_out = std::move(samples);
  return report;
}

}  // namespace sketchpipe
