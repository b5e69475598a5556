// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "sketchpipe/error.h"
#include "sketchpipe/filtering.h"
#include "test_support.h"

using namespace sketchpipe;

namespace {

VQAInstance rendered(const std::string& id, const std::string& answer = "4") {
  auto inst = test::make_instance(id, "v0", "How many?", answer);
  inst.image_hash = test::png_digest("v0");
  return inst;
}

std::string reply(bool correct, const std::string& gold = "4") {
  return correct ? "Counted.\nFINAL ANSWER: " + gold : "Counted.\nFINAL ANSWER: 999";
}

// Backend that fails the first `failures` calls, then answers.
class Flaky : public ChatBackend {
 public:
  Flaky(int failures, std::string answer) : failures_(failures), answer_(std::move(answer)) {}
  std::vector<ChatMessage> complete(const std::vector<ChatMessage>&, const CompletionParams& p,
                                    RoleTag) override {
    ++calls;
    if (calls <= failures_) throw Error(ErrorCode::kBackendError, "HTTP 503");
    return std::vector<ChatMessage>(static_cast<std::size_t>(p.n_samples),
                                    ChatMessage::text(ChatRole::kAssistant, answer_));
  }
  int calls = 0;

 private:
  int failures_;
  std::string answer_;
};

}  // namespace

TEST(Judge, NormalizesAnswers) {
  EXPECT_EQ(normalize_answer("  The  Answer. "), "the answer");
  EXPECT_EQ(normalize_answer("$x^2$"), "x^2");
  EXPECT_EQ(normalize_answer("$$ 42 $$."), "42");
  EXPECT_EQ(normalize_answer("\\( \\frac{1}{2} \\)"), "\\frac{1}{2}");
  EXPECT_EQ(normalize_answer("\\[B\\]"), "b");
  EXPECT_EQ(normalize_answer("...."), "");
}

TEST(Judge, NumericParsing) {
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("3.5"), 3.5);
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("1/4"), 0.25);
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("$\\frac{3}{4}$"), 0.75);
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("1,234.5"), 1234.5);
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("12 cm", {"cm"}), 12.0);
  EXPECT_DOUBLE_EQ(*parse_numeric_answer("1e3"), 1000.0);
  EXPECT_FALSE(parse_numeric_answer("12 cm"));
  EXPECT_FALSE(parse_numeric_answer("1/0"));
  EXPECT_FALSE(parse_numeric_answer("abc"));
}

TEST(Judge, Methods) {
  JudgeConfig exact;
  EXPECT_TRUE(judge_answer("B.", "b", exact));
  EXPECT_FALSE(judge_answer("0.5", "1/2", exact));

  JudgeConfig numeric;
  numeric.method = JudgeMethod::kNumericTolerance;
  numeric.ignored_units = {"m"};
  EXPECT_TRUE(judge_answer("0.5", "1/2", numeric));
  EXPECT_TRUE(judge_answer("100.00000001", "100", numeric));
  EXPECT_FALSE(judge_answer("100.1", "100", numeric));
  EXPECT_TRUE(judge_answer("3 m", "3", numeric));
  EXPECT_TRUE(judge_answer("North", "north", numeric)) << "falls back to exact";

  JudgeConfig hooked;
  hooked.method = JudgeMethod::kJudgeBackend;
  try {
    judge_answer("a", "b", hooked);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBackendError);
  }
  hooked.hook = [](std::string_view p, std::string_view g) { return p.size() == g.size(); };
  EXPECT_TRUE(judge_answer("ab", "cd", hooked));
  EXPECT_THROW(judge_answer("", "x", exact), Error);
  EXPECT_EQ(judge("x", "X", exact).verdict, true);

  const auto cfg = JudgeConfig::from_json(nlohmann::json::parse(
      R"({"method": "numeric_tolerance", "tolerance": 0.01, "ignored_units": ["kg"]})"));
  EXPECT_EQ(cfg.method, JudgeMethod::kNumericTolerance);
  EXPECT_THROW(JudgeConfig::from_json(nlohmann::json::parse(R"({"method": "vibes"})")), Error);
}

TEST(Judge, ExtractFinalAnswer) {
  EXPECT_EQ(extract_final_answer("a\nFINAL ANSWER: 1\nFINAL ANSWER: 2 "), "2");
  EXPECT_EQ(extract_final_answer("  7  "), "7");
  EXPECT_EQ(extract_final_answer("says FINAL ANSWER: 3 inline"), "says FINAL ANSWER: 3 inline");
}

TEST(Consensus, DecisionTableAnyOfSix) {
  ConsensusConfig cfg;
  cfg.experts = {"e0", "e1", "e2"};
  cfg.samples_per_expert = 2;
  for (bool early : {true, false}) {
    cfg.early_exit = early;
    for (int pattern = 0; pattern < 64; ++pattern) {
      std::vector<std::unique_ptr<ScriptedBackend>> owned;
      std::vector<NamedBackend> experts;
      for (int e = 0; e < 3; ++e) {
        std::vector<std::vector<std::string>> turns;
        for (int s = 0; s < 2; ++s) turns.push_back({reply((pattern >> (2 * e + s)) & 1)});
        owned.push_back(ScriptedBackend::from_responses(RoleTag::kSolver, turns));
        experts.push_back({cfg.experts[e], owned.back().get()});
      }
      const auto rec = consensus_filter(rendered("q"), experts, cfg);
      const bool any = pattern != 0;
      EXPECT_EQ(rec.decision, any ? Decision::kKeep : Decision::kDiscard) << pattern;
      std::size_t expect_calls = 6;
      if (early && any) {
        expect_calls = 1;
        while (!((pattern >> (expect_calls - 1)) & 1)) ++expect_calls;
      }
      EXPECT_EQ(rec.calls, expect_calls) << pattern;
      ASSERT_EQ(rec.evidence.size(), expect_calls);
      for (std::size_t i = 0; i < rec.evidence.size(); ++i) {
        EXPECT_EQ(rec.evidence[i].backend, cfg.experts[i / 2]);
        EXPECT_EQ(rec.evidence[i].sample, static_cast<int>(i % 2));
        EXPECT_EQ(rec.evidence[i].verdict, static_cast<bool>((pattern >> i) & 1));
      }
    }
  }
}

TEST(Consensus, ErrorPolicies) {
  ConsensusConfig cfg;
  cfg.experts = {"a", "b"};
  cfg.samples_per_expert = 1;
  auto run = [&](ErrorPolicy policy, int failures, const std::string& answer_b) {
    cfg.common.on_error = policy;
    Flaky a(100, "x");
    Flaky b(failures, "FINAL ANSWER: " + answer_b);
    std::vector<NamedBackend> experts{{"a", &a}, {"b", &b}};
    cfg.early_exit = true;
    return consensus_filter(rendered("q"), experts, cfg);
  };
  auto rec = run(ErrorPolicy::kUndecided, 0, "4");
  EXPECT_EQ(rec.decision, Decision::kUndecided);
  EXPECT_TRUE(rec.error);
  EXPECT_EQ(run(ErrorPolicy::kDiscard, 0, "4").decision, Decision::kDiscard);
  // Retry: expert a keeps failing, so the retries are exhausted on it.
  rec = run(ErrorPolicy::kRetry, 0, "4");
  EXPECT_EQ(rec.decision, Decision::kUndecided);
  EXPECT_EQ(rec.calls, 3u);

  // A correct sample before a failure still keeps the instance.
  cfg.common.on_error = ErrorPolicy::kUndecided;
  cfg.early_exit = false;
  Flaky good(0, "FINAL ANSWER: 4");
  Flaky bad(100, "x");
  std::vector<NamedBackend> experts{{"a", &good}, {"b", &bad}};
  rec = consensus_filter(rendered("q"), experts, cfg);
  EXPECT_EQ(rec.decision, Decision::kKeep);
  EXPECT_TRUE(rec.error);
}

TEST(Consensus, RetryRecovers) {
  ConsensusConfig cfg;
  cfg.experts = {"a"};
  cfg.samples_per_expert = 1;
  cfg.common.on_error = ErrorPolicy::kRetry;
  cfg.common.max_retries = 2;
  Flaky a(2, "FINAL ANSWER: 4");
  const auto rec = consensus_filter(rendered("q"), {{"a", &a}}, cfg);
  EXPECT_EQ(rec.decision, Decision::kKeep);
  EXPECT_EQ(rec.calls, 3u);
  EXPECT_FALSE(rec.error);
}

TEST(Consensus, ConfigValidation) {
  EXPECT_THROW(ConsensusConfig::from_json(nlohmann::json::object()), Error);
  const auto c = ConsensusConfig::from_json(nlohmann::json::parse(
      R"({"experts": ["a", "b"], "samples_per_expert": 3, "on_error": "discard", "judge": {"method": "numeric_tolerance"}})"));
  EXPECT_EQ(c.samples_per_expert, 3);
  EXPECT_EQ(c.common.on_error, ErrorPolicy::kDiscard);
  EXPECT_DOUBLE_EQ(c.params.temperature, kSolverSamplingTemperature);
  Flaky a(0, "x");
  EXPECT_THROW(consensus_filter(rendered("q"), {{"a", &a}}, c), Error) << "expert list mismatch";
}

TEST(Img2Code, AnySolverAcceptsOnRerenderedImage) {
  Img2CodeConfig cfg;
  const std::string rerendered = test::png_digest("re-rendered");
  for (int pattern = 0; pattern < 4; ++pattern) {
    auto s0 = ScriptedBackend::from_responses(RoleTag::kSolver, {{reply(pattern & 1)}});
    auto s1 = ScriptedBackend::from_responses(RoleTag::kSolver, {{reply(pattern & 2)}});
    const auto rec = img2code_accept(rendered("q"), rerendered, {{"s0", s0.get()}, {"s1", s1.get()}}, cfg);
    EXPECT_EQ(rec.decision, pattern ? Decision::kKeep : Decision::kDiscard);
    EXPECT_EQ(rec.filter, "img2code");
  }
  // The question is asked over the re-rendered image, not the original.
  class Spy : public ChatBackend {
   public:
    std::vector<ChatMessage> complete(const std::vector<ChatMessage>& m, const CompletionParams&,
                                      RoleTag) override {
      image = m.back().content[0].image_digest;
      return {ChatMessage::text(ChatRole::kAssistant, "FINAL ANSWER: 4")};
    }
    std::string image;
  } spy;
  img2code_accept(rendered("q"), rerendered, {{"spy", &spy}}, cfg);
  EXPECT_EQ(spy.image, rerendered);
  EXPECT_THROW(img2code_accept(rendered("q"), rerendered, {}, cfg), Error);
}

TEST(Rejection, KeepsOnlyWhatTheBaseGetsWrong) {
  RejectionConfig cfg;
  cfg.params.temperature = 0.9;  // forced back to greedy
  std::vector<VQAInstance> instances;
  std::vector<std::vector<std::string>> turns;
  for (int i = 0; i < 6; ++i) {
    instances.push_back(rendered("r" + std::to_string(i)));
    turns.push_back({reply(i % 3 == 0)});
  }
  class Greedy : public ChatBackend {
   public:
    explicit Greedy(std::unique_ptr<ScriptedBackend> inner) : inner_(std::move(inner)) {}
    std::vector<ChatMessage> complete(const std::vector<ChatMessage>& m, const CompletionParams& p,
                                      RoleTag r) override {
      EXPECT_EQ(p.temperature, 0.0);
      return inner_->complete(m, p, r);
    }

   private:
    std::unique_ptr<ScriptedBackend> inner_;
  } base(ScriptedBackend::from_responses(RoleTag::kSolver, turns));
  const auto res = rejection_sample(instances, {"base", &base}, cfg);
  ASSERT_EQ(res.records.size(), 6u);
  std::vector<std::string> kept;
  for (const auto& r : res.retained) kept.push_back(r.id);
  EXPECT_EQ(kept, (std::vector<std::string>{"r1", "r2", "r4", "r5"}));
  EXPECT_EQ(res.records[0].decision, Decision::kDiscard);

  Flaky broken(100, "x");
  const auto rec = rejection_decision(rendered("e"), {"base", &broken}, cfg);
  EXPECT_EQ(rec.decision, Decision::kUndecided);
  cfg.common.on_error = ErrorPolicy::kDiscard;
  EXPECT_EQ(rejection_decision(rendered("e"), {"base", &broken}, cfg).decision, Decision::kDiscard);
}

TEST(FilterRecord, JsonRoundTrip) {
  FilterRecord r{"i", "consensus", Decision::kKeep, {{"a", 1, "resp", "4", true}}, 2, "boom"};
  EXPECT_EQ(FilterRecord::from_json(nlohmann::json::parse(r.to_json().dump())), r);
  r.error.reset();
  EXPECT_EQ(FilterRecord::from_json(r.to_json()), r);
  EXPECT_THROW(FilterRecord::from_json(nlohmann::json::parse(R"({"instance_id": "x"})")), Error);
}

TEST(QuestionMessages, RequireImage) {
  auto inst = rendered("q");
  const auto m = question_messages(inst, inst.image_hash, FilterPrompt{});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[1].content[1].text, "How many?");
  EXPECT_THROW(question_messages(inst, "", FilterPrompt{}), Error);
}

TEST(PassAtK, FoldAndCurve) {
  std::vector<QuestionSamples> s{{"a", {false, true, false}, false, 0},
                                 {"b", {false, false, false}, false, 0},
                                 {"c", {true, true, true}, false, 0},
                                 {"d", {}, true, 0}};
  EXPECT_DOUBLE_EQ(fold_pass_at(s, 1).aggregate, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(fold_pass_at(s, 2).aggregate, 2.0 / 3.0);
  EXPECT_EQ(fold_pass_at(s, 2).counted, 3u);
  EXPECT_DOUBLE_EQ(fold_pass_at(s, 2, false).aggregate, 0.5);
  EXPECT_EQ(fold_pass_at(s, 3).per_question[2].n_correct, 3);
  EXPECT_EQ(pass_at_curve(s, 3), (std::vector<double>{1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0}));
  EXPECT_THROW(fold_pass_at(s, 0), Error);
  EXPECT_EQ(fold_pass_at({}, 1).aggregate, 0.0);
}

TEST(PassAtK, SolverAloneSampler) {
  std::vector<VQAInstance> qs{rendered("a", "4"), rendered("b", "7")};
  auto solver = ScriptedBackend::from_responses(
      RoleTag::kSolver, {{"FINAL ANSWER: 1", "FINAL ANSWER: 4", "x"}, {"FINAL ANSWER: 1", "2", "3"}});
  PassAtKConfig cfg;
  cfg.k = 3;
  std::vector<QuestionSamples> samples;
  const auto report = pass_at_k(qs, solver_alone_sampler(*solver, cfg.params), cfg, &samples);
  EXPECT_DOUBLE_EQ(report.aggregate, 0.5);
  EXPECT_EQ(samples[0].correct, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(report.to_json().at("per_question").size(), 2u);
}

TEST(PassAtK, ErrorsAndDedup) {
  std::vector<VQAInstance> qs{rendered("a"), rendered("b"), rendered("c")};
  AnswerSampler sampler = [](const VQAInstance& q, int k) -> std::vector<std::string> {
    if (q.id == "b") throw Error(ErrorCode::kBackendError, "down");
    if (q.id == "c") return std::vector<std::string>(static_cast<std::size_t>(k), "4");
    return std::vector<std::string>(static_cast<std::size_t>(k), "5");
  };
  PassAtKConfig cfg;
  cfg.k = 4;
  cfg.dedup_identical = true;
  std::vector<QuestionSamples> samples;
  const auto r = pass_at_k(qs, sampler, cfg, &samples);
  EXPECT_EQ(r.counted, 2u);
  EXPECT_DOUBLE_EQ(r.aggregate, 0.5);
  EXPECT_TRUE(samples[1].error);
  EXPECT_EQ(r.per_question[2].n_correct, 1) << "duplicates of a correct answer count once";
  EXPECT_EQ(samples[2].distinct_answers, 1u);
  cfg.exclude_errors = false;
  EXPECT_DOUBLE_EQ(pass_at_k(qs, sampler, cfg).aggregate, 1.0 / 3.0);

  AnswerSampler short_sampler = [](const VQAInstance&, int) { return std::vector<std::string>{"4"}; };
  EXPECT_THROW(pass_at_k(qs, short_sampler, cfg), Error);
}

TEST(PassAtK, AgenticSampler) {
  test::TempDir dir;
  BlobStore blobs(dir.path());
  test::FakeRenderer renderer;
  auto solver = ScriptedBackend::from_responses(
      RoleTag::kSolver, {{"FINAL ANSWER: 4"}, {"r\n<tool_call>zoom</tool_call>"}, {"FINAL ANSWER: 5"}});
  auto editor = ScriptedBackend::from_responses(RoleTag::kEditor, {{"v1"}});
  PassAtKConfig cfg;
  cfg.k = 2;
  std::vector<QuestionSamples> samples;
  const auto r = pass_at_k({rendered("a")}, agentic_sampler(*solver, *editor, renderer, blobs, EpisodeConfig{}),
                           cfg, &samples);
  EXPECT_DOUBLE_EQ(r.aggregate, 1.0);
  EXPECT_EQ(samples[0].correct, (std::vector<bool>{true, false}));
  // Transcript exhausted on the next run: the question is marked errored.
  const auto again = pass_at_k({rendered("a")}, agentic_sampler(*solver, *editor, renderer, blobs, EpisodeConfig{}),
                               cfg, &samples);
  EXPECT_TRUE(samples[0].error);
  EXPECT_EQ(again.counted, 0u);
}
