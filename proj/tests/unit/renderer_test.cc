// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <deque>

#include "sketchpipe/error.h"
#include "sketchpipe/renderer.h"
#include "test_support.h"

using namespace sketchpipe;
using namespace std::chrono_literals;
using sketchpipe::test::png_bytes;

namespace {

RenderSpec sh(std::string program) { return RenderSpec{"sh", std::move(program), "sh"}; }

// Editor stub handing out canned fixes and recording what it was shown.
class CannedEditor : public CodeEditorBackend {
 public:
  explicit CannedEditor(std::deque<std::string> fixes) : fixes_(std::move(fixes)) {}
  std::string fix(const RenderSpec& code, std::string_view log) override {
    seen_code.push_back(code.source_text);
    seen_logs.emplace_back(log);
    auto f = fixes_.front();
    fixes_.pop_front();
    return f;
  }
  std::vector<std::string> seen_code, seen_logs;

 private:
  std::deque<std::string> fixes_;
};

}  // namespace

TEST(SandboxRenderer, RendersPng) {
  SandboxRenderer r(test::sh_policy());
  const auto out = r.render(sh(test::png_script("hello")));
  ASSERT_EQ(out.status, RenderStatus::kOk) << out.stderr_log;
  EXPECT_EQ(*out.image_bytes, png_bytes("hello"));
  EXPECT_TRUE(validate(out).pass);
}

TEST(SandboxRenderer, ClassifiesFailures) {
  SandboxRenderer r(test::sh_policy());
  EXPECT_EQ(r.render(sh("echo 'boom' >&2; exit 3")).status, RenderStatus::kRuntimeError);
  const auto syntax = r.render(sh("if then fi ("));
  EXPECT_EQ(syntax.status, RenderStatus::kSyntaxError) << syntax.stderr_log;
  EXPECT_EQ(r.render(sh("true")).status, RenderStatus::kEmptyOutput);
  const auto logged = r.render(sh("echo 'trace line' >&2; exit 1"));
  EXPECT_NE(logged.stderr_log.find("trace line"), std::string::npos);
}

TEST(SandboxRenderer, TimeoutKillsProcessTree) {
  auto policy = test::sh_policy(300ms);
  SandboxRenderer r(policy);
  const auto start = std::chrono::steady_clock::now();
  const auto out = r.render(sh("sleep 5 & sleep 5; wait"));
  const auto elapsed = std::chrono::steady_clock::now() - start;
  EXPECT_EQ(out.status, RenderStatus::kTimeout);
  EXPECT_LE(out.wall_time, policy.timeout + policy.grace);
  EXPECT_LT(elapsed, 2s) << "grandchild kept the log pipe open";
  EXPECT_FALSE(validate(out).pass);
}

TEST(SandboxRenderer, PrivateWorkingDirectory) {
  SandboxRenderer r(test::sh_policy());
  const auto a = r.render(sh("pwd > marker; printf '\\211PNG\\r\\n\\032\\n' > \"$1\"; cat marker >> \"$1\""));
  const auto b = r.render(sh("pwd > marker; printf '\\211PNG\\r\\n\\032\\n' > \"$1\"; cat marker >> \"$1\""));
  ASSERT_EQ(a.status, RenderStatus::kOk) << a.stderr_log;
  ASSERT_EQ(b.status, RenderStatus::kOk);
  EXPECT_NE(*a.image_bytes, *b.image_bytes);
}

TEST(SandboxRenderer, OutputSizeCap) {
  auto policy = test::sh_policy();
  policy.limits.max_output_bytes = 64;
  SandboxRenderer r(policy);
  const auto out = r.render(sh("head -c 4096 /dev/zero > \"$1\""));
  EXPECT_NE(out.status, RenderStatus::kOk);
}

TEST(SandboxRenderer, SetupErrors) {
  SandboxRenderer r(test::sh_policy());
  try {
    r.render(RenderSpec{"sh", "true", "nope"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProfileNotFound);
  }
  auto policy = test::sh_policy();
  policy.profiles["ghost"].command = {"/nonexistent/bin/renderer", "{code}", "{output}"};
  SandboxRenderer g(policy);
  try {
    g.render(RenderSpec{"x", "true", "ghost"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSandboxSetup);
  }
}

TEST(SandboxPolicy, Validation) {
  auto p = test::sh_policy();
  p.profiles["bad"].command = {"python", "{code}"};
  EXPECT_THROW(p.validate(), Error);
  p = test::sh_policy();
  p.timeout = 0ms;
  EXPECT_THROW(p.validate(), Error);

  const auto parsed = SandboxPolicy::from_json(nlohmann::json::parse(
      R"({"timeout_ms": 1500, "profiles": {"py": {"command": "python3 {code} {output}", "timeout_ms": 900}}})"));
  EXPECT_EQ(parsed.timeout, 1500ms);
  EXPECT_EQ(parsed.profile("py").command, (std::vector<std::string>{"python3", "{code}", "{output}"}));
  EXPECT_EQ(*parsed.profile("py").timeout, 900ms);
  EXPECT_THROW(SandboxPolicy::from_json(nlohmann::json::parse(R"({"profiles": {"x": {}}})")), Error);
}

TEST(Validate, Containers) {
  EXPECT_TRUE(validate(RenderOutcome::ok(png_bytes("x"))).pass);
  EXPECT_FALSE(validate(RenderOutcome::ok({'G', 'I', 'F', '8', '9', 'a', 0, 0, 0})).pass);
  const std::string svg = R"(<?xml version="1.0"?><svg xmlns="http://www.w3.org/2000/svg"><rect/></svg>)";
  EXPECT_TRUE(validate(RenderOutcome::ok({svg.begin(), svg.end()})).pass);
  const std::string broken = "<svg><rect></svg>";
  EXPECT_FALSE(validate(RenderOutcome::ok({broken.begin(), broken.end()})).pass);
  const std::string not_svg = "<html></html>";
  EXPECT_FALSE(validate(RenderOutcome::ok({not_svg.begin(), not_svg.end()})).pass);

  ImageLimits tight;
  tight.min_bytes = 100;
  EXPECT_FALSE(validate(RenderOutcome::ok(png_bytes("x")), tight).pass);
  tight.min_bytes = 1;
  tight.max_output_bytes = 9;
  EXPECT_FALSE(validate(RenderOutcome::ok(png_bytes("xxxx")), tight).pass);
  const auto failed = validate(RenderOutcome::failed(RenderStatus::kTimeout, "slow"));
  EXPECT_FALSE(failed.pass);
  EXPECT_NE(failed.reason.find("timeout"), std::string::npos);
}

TEST(RepairLoop, SucceedsFirstTry) {
  test::FakeRenderer r;
  CannedEditor ed({});
  const auto res = repair_loop(RenderSpec{"py", "ok", "fake"}, r, ed, 3);
  ASSERT_TRUE(res.ok());
  EXPECT_EQ(res.editor_calls, 0);
  EXPECT_EQ(res.render_calls, 1);
  EXPECT_EQ(res.success().image_bytes, png_bytes("ok"));
}

TEST(RepairLoop, RepairsWithErrorLog) {
  test::FakeRenderer r;
  CannedEditor ed({"SYNTAX: still", "fixed"});
  const auto res = repair_loop(RenderSpec{"py", "FAIL: first", "fake"}, r, ed, 3);
  ASSERT_TRUE(res.ok());
  EXPECT_EQ(res.editor_calls, 2);
  EXPECT_EQ(res.render_calls, 3);
  EXPECT_EQ(res.success().code.source_text, "fixed");
  EXPECT_EQ(ed.seen_code, (std::vector<std::string>{"FAIL: first", "SYNTAX: still"}));
  EXPECT_NE(ed.seen_logs[0].find("Traceback"), std::string::npos);
  EXPECT_EQ(res.failures.size(), 2u);
}

TEST(RepairLoop, BacksOffAfterExactlyR) {
  for (int r_max = 0; r_max <= 4; ++r_max) {
    test::FakeRenderer r;
    std::deque<std::string> fixes;
    for (int i = 0; i < r_max; ++i) fixes.push_back("FAIL: " + std::to_string(i));
    CannedEditor ed(fixes);
    const auto res = repair_loop(RenderSpec{"py", "FAIL: start", "fake"}, r, ed, r_max);
    ASSERT_FALSE(res.ok());
    EXPECT_EQ(res.editor_calls, r_max);
    EXPECT_EQ(res.render_calls, r_max + 1);
    EXPECT_EQ(res.backoff().last_code.source_text, r_max == 0 ? "FAIL: start" : "FAIL: " + std::to_string(r_max - 1));
  }
  test::FakeRenderer r;
  CannedEditor ed({});
  EXPECT_THROW(repair_loop(RenderSpec{"py", "x", "fake"}, r, ed, -1), Error);
}

TEST(RenderAll, PreservesOrder) {
  test::FakeRenderer r;
  std::vector<RenderSpec> specs;
  for (int i = 0; i < 40; ++i) specs.push_back({"py", "p" + std::to_string(i), "fake"});
  const auto out = render_all(r, specs, 8);
  ASSERT_EQ(out.size(), specs.size());
  for (int i = 0; i < 40; ++i) EXPECT_EQ(*out[i].image_bytes, png_bytes("p" + std::to_string(i)));
}
