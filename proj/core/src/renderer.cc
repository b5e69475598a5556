// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/renderer.h"

#include <fcntl.h>
#include <poll.h>
#include <sched.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <future>
#include <regex>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include "sketchpipe/error.h"
#include "sketchpipe/thread_pool.h"

extern char** environ;

namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace sketchpipe {

std::string_view to_string(RenderStatus s) {
  switch (s) {
    case RenderStatus::kOk: return "ok";
    case RenderStatus::kSyntaxError: return "syntax_error";
    case RenderStatus::kRuntimeError: return "runtime_error";
    case RenderStatus::kTimeout: return "timeout";
    case RenderStatus::kEmptyOutput: return "empty_output";
  }
  return "runtime_error";
}

RenderOutcome RenderOutcome::ok(std::vector<std::uint8_t> bytes, std::string log) {
  RenderOutcome o;
  o.status = RenderStatus::kOk;
  o.image_bytes = std::move(bytes);
  o.stderr_log = std::move(log);
  return o;
}

RenderOutcome RenderOutcome::failed(RenderStatus status, std::string log) {
  RenderOutcome o;
  o.status = status;
  o.stderr_log = std::move(log);
  return o;
}

// ------------------------------------------------------------------ policy

namespace {

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

std::string replace_all(std::string s, std::string_view from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

std::vector<std::string> split_command(const std::string& cmd) {
  std::istringstream in(cmd);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

}  // namespace

void SandboxPolicy::validate() const {
  if (timeout <= 0ms) throw Error(ErrorCode::kConfig, "renderer timeout must be > 0");
  if (limits.max_output_bytes == 0 || limits.min_bytes > limits.max_output_bytes) {
    throw Error(ErrorCode::kConfig, "renderer byte limits are inconsistent");
  }
  for (const auto& [name, p] : profiles) {
    std::size_t code = 0, output = 0;
    for (const auto& arg : p.command) {
      code += count_occurrences(arg, "{code}");
      output += count_occurrences(arg, "{output}");
    }
    if (p.command.empty() || code != 1 || output != 1) {
      throw Error(ErrorCode::kConfig,
                  "renderer profile '" + name +
                      "' needs exactly one {code} and one {output} placeholder");
    }
    if (p.timeout && *p.timeout <= 0ms) {
      throw Error(ErrorCode::kConfig, "renderer profile '" + name + "' timeout must be > 0");
    }
  }
}

const RendererProfile& SandboxPolicy::profile(std::string_view name) const {
  auto it = profiles.find(std::string(name));
  if (it == profiles.end()) {
    throw Error(ErrorCode::kProfileNotFound,
                "renderer profile '" + std::string(name) + "' not configured");
  }
  return it->second;
}

SandboxPolicy SandboxPolicy::from_json(const nlohmann::json& j) {
  SandboxPolicy p;
  try {
    if (j.contains("timeout_ms")) p.timeout = std::chrono::milliseconds(j.at("timeout_ms").get<long>());
    if (j.contains("grace_ms")) p.grace = std::chrono::milliseconds(j.at("grace_ms").get<long>());
    p.limits.max_output_bytes = j.value("max_output_bytes", p.limits.max_output_bytes);
    p.limits.min_bytes = j.value("min_bytes", p.limits.min_bytes);
    p.isolate_working_dir = j.value("isolate_working_dir", true);
    p.network_disabled = j.value("network_disabled", true);
    if (j.contains("temp_root")) p.temp_root = j.at("temp_root").get<std::string>();
    if (j.contains("profiles")) {
      for (const auto& [name, pj] : j.at("profiles").items()) {
        RendererProfile prof;
        const auto& cmd = pj.at("command");
        prof.command = cmd.is_string() ? split_command(cmd.get<std::string>())
                                       : cmd.get<std::vector<std::string>>();
        if (pj.contains("timeout_ms")) {
          prof.timeout = std::chrono::milliseconds(pj.at("timeout_ms").get<long>());
        }
        prof.preamble = pj.value("preamble", "");
        prof.code_suffix = pj.value("code_suffix", prof.code_suffix);
        prof.output_suffix = pj.value("output_suffix", prof.output_suffix);
        prof.syntax_error_pattern = pj.value("syntax_error_pattern", prof.syntax_error_pattern);
        p.profiles.emplace(name, std::move(prof));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("renderer config: ") + e.what());
  }
  p.validate();
  return p;
}

// ----------------------------------------------------------------- sandbox

namespace {

[[noreturn]] void setup_fail(const std::string& what) {
  throw Error(ErrorCode::kSandboxSetup, what + ": " + std::strerror(errno));
}

class TempDir {
 public:
  explicit TempDir(const fs::path& root) {
    std::error_code ec;
    fs::create_directories(root, ec);
    std::string templ = (root / "sketchpipe-render-XXXXXX").string();
    if (::mkdtemp(templ.data()) == nullptr) setup_fail("mkdtemp under " + root.string());
    path_ = templ;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

fs::path resolve_temp_root(const SandboxPolicy& policy) {
  if (const char* env = std::getenv(kSandboxRootEnv); env && *env) return env;
  if (!policy.temp_root.empty()) return policy.temp_root;
  return fs::temp_directory_path();
}

void write_file(const fs::path& p, std::string_view data) {
  std::ofstream out(p, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) setup_fail("write " + p.string());
}

std::vector<std::string> child_environment(const fs::path& workdir) {
  std::vector<std::string> env;
  const char* path = std::getenv("PATH");
  env.push_back(std::string("PATH=") + (path ? path : "/usr/local/bin:/usr/bin:/bin"));
  env.push_back("HOME=" + workdir.string());
  env.push_back("TMPDIR=" + workdir.string());
  env.push_back("LANG=C.UTF-8");
  env.push_back("MPLBACKEND=Agg");
  env.push_back("PYTHONHASHSEED=0");
  env.push_back("PYTHONDONTWRITEBYTECODE=1");
  env.push_back("SOURCE_DATE_EPOCH=0");
  return env;
}

struct Pipe {
  int fds[2] = {-1, -1};
  Pipe() {
    if (::pipe2(fds, O_CLOEXEC) != 0) setup_fail("pipe2");
  }
  ~Pipe() {
    close_read();
    close_write();
  }
  void close_read() {
    if (fds[0] >= 0) ::close(fds[0]);
    fds[0] = -1;
  }
  void close_write() {
    if (fds[1] >= 0) ::close(fds[1]);
    fds[1] = -1;
  }
};

constexpr std::size_t kMaxLogBytes = 1u << 20;

void drain(int fd, std::string& log) {
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n > 0) {
      if (log.size() < kMaxLogBytes) {
        log.append(buf, std::min<std::size_t>(static_cast<std::size_t>(n), kMaxLogBytes - log.size()));
      }
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    return;
  }
}

}  // namespace

SandboxRenderer::SandboxRenderer(SandboxPolicy policy) : policy_(std::move(policy)) {
  policy_.validate();
}

RenderOutcome SandboxRenderer::render(const RenderSpec& spec) {
  const RendererProfile& prof = policy_.profile(spec.renderer_profile);
  const auto timeout = prof.timeout.value_or(policy_.timeout);

  const fs::path root = resolve_temp_root(policy_);
  TempDir dir(root);
  const fs::path code_path = dir.path() / ("program" + prof.code_suffix);
  const fs::path out_path = dir.path() / ("output" + prof.output_suffix);
  std::string program = prof.preamble;
  if (!program.empty() && program.back() != '\n') program.push_back('\n');
  program += spec.source_text;
  write_file(code_path, program);

  std::vector<std::string> args;
  for (const auto& a : prof.command) {
    args.push_back(replace_all(replace_all(a, "{code}", code_path.string()), "{output}",
                               out_path.string()));
  }
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  auto env_strings = child_environment(dir.path());
  std::vector<char*> envp;
  for (auto& e : env_strings) envp.push_back(e.data());
  envp.push_back(nullptr);

  Pipe log_pipe;
  Pipe status_pipe;  // carries exec errno back to the parent
  const fs::path workdir = policy_.isolate_working_dir ? dir.path() : fs::current_path();
  const rlim_t fsize = static_cast<rlim_t>(policy_.limits.max_output_bytes) + 1;
  const bool want_netns = policy_.network_disabled;

  const auto started = std::chrono::steady_clock::now();
  const pid_t pid = ::fork();
  if (pid < 0) setup_fail("fork");
  if (pid == 0) {
    // Child: async-signal-safe calls only.
    ::setpgid(0, 0);
    if (want_netns) {
      // Fresh user+net namespace leaves only a downed loopback device.
      if (::unshare(CLONE_NEWUSER | CLONE_NEWNET) != 0) {
        // Unprivileged namespaces unavailable; continue without isolation.
      }
    }
    if (::chdir(workdir.c_str()) != 0) _exit(126);
    const int devnull = ::open("/dev/null", O_RDONLY);
    if (devnull >= 0) ::dup2(devnull, STDIN_FILENO);
    ::dup2(log_pipe.fds[1], STDOUT_FILENO);
    ::dup2(log_pipe.fds[1], STDERR_FILENO);
    struct rlimit lim{fsize, fsize};
    ::setrlimit(RLIMIT_FSIZE, &lim);
    struct rlimit core{0, 0};
    ::setrlimit(RLIMIT_CORE, &core);
    ::execvpe(argv[0], argv.data(), envp.data());
    const int err = errno;
    [[maybe_unused]] auto w = ::write(status_pipe.fds[1], &err, sizeof err);
    _exit(127);
  }
  ::setpgid(pid, pid);
  log_pipe.close_write();
  status_pipe.close_write();

  std::string log;
  bool timed_out = false;
  int wstatus = 0;
  bool reaped = false;
  const auto deadline = started + timeout;
  ::fcntl(log_pipe.fds[0], F_SETFL, O_NONBLOCK);
  while (!reaped) {
    const auto now = std::chrono::steady_clock::now();
    if (now >= deadline) {
      timed_out = true;
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      while (::waitpid(pid, &wstatus, 0) < 0 && errno == EINTR) {
      }
      reaped = true;
      break;
    }
    const auto slice = std::min<long>(
        20, std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1);
    struct pollfd pfd{log_pipe.fds[0], POLLIN, 0};
    ::poll(&pfd, 1, static_cast<int>(slice));
    drain(log_pipe.fds[0], log);
    const pid_t r = ::waitpid(pid, &wstatus, WNOHANG);
    if (r == pid) reaped = true;
  }
  // Leftover grandchildren would keep the log pipe open; kill the group.
  ::kill(-pid, SIGKILL);
  drain(log_pipe.fds[0], log);

  int exec_errno = 0;
  const bool exec_failed =
      ::read(status_pipe.fds[0], &exec_errno, sizeof exec_errno) == sizeof exec_errno;

  RenderOutcome outcome;
  outcome.wall_time = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now() - started);
  if (exec_failed) {
    errno = exec_errno;
    setup_fail("exec '" + args.front() + "'");
  }

  if (timed_out) {
    outcome.status = RenderStatus::kTimeout;
    log += "\n[sandbox] killed after " + std::to_string(timeout.count()) + " ms timeout";
    outcome.stderr_log = std::move(log);
    return outcome;
  }

  const bool exited_ok = WIFEXITED(wstatus) && WEXITSTATUS(wstatus) == 0;
  if (!exited_ok) {
    if (WIFSIGNALED(wstatus)) {
      const int sig = WTERMSIG(wstatus);
      log += "\n[sandbox] terminated by signal " + std::to_string(sig);
      if (sig == SIGXFSZ) log += " (output size cap exceeded)";
    } else {
      log += "\n[sandbox] exit status " + std::to_string(WEXITSTATUS(wstatus));
    }
    const std::regex syntax(prof.syntax_error_pattern,
                            std::regex::ECMAScript | std::regex::icase);
    outcome.status = std::regex_search(log, syntax) ? RenderStatus::kSyntaxError
                                                    : RenderStatus::kRuntimeError;
    outcome.stderr_log = std::move(log);
    return outcome;
  }

  std::error_code ec;
  const auto size = fs::file_size(out_path, ec);
  if (ec || size == 0) {
    outcome.status = RenderStatus::kEmptyOutput;
    log += "\n[sandbox] program produced no output image";
    outcome.stderr_log = std::move(log);
    return outcome;
  }
  if (size > policy_.limits.max_output_bytes) {
    outcome.status = RenderStatus::kRuntimeError;
    log += "\n[sandbox] output exceeds max_output_bytes";
    outcome.stderr_log = std::move(log);
    return outcome;
  }
  std::ifstream in(out_path, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  outcome.status = RenderStatus::kOk;
  outcome.image_bytes = std::move(bytes);
  outcome.stderr_log = std::move(log);
  return outcome;
}

RenderOutcome render(const RenderSpec& spec, const SandboxPolicy& policy) {
  return SandboxRenderer(policy).render(spec);
}

// -------------------------------------------------------------- validation

ImageContainer sniff_container(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngMagic, kPngMagic + 8, bytes.begin())) {
    return ImageContainer::kPng;
  }
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  if (text.starts_with("\xEF\xBB\xBF")) text.remove_prefix(3);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return ImageContainer::kUnknown;
  text.remove_prefix(first);
  if (text.starts_with("<?xml") || text.starts_with("<svg") || text.starts_with("<!--") ||
      text.starts_with("<!DOCTYPE")) {
    return ImageContainer::kSvg;
  }
  return ImageContainer::kUnknown;
}

namespace {

bool well_formed_svg(std::span<const std::uint8_t> bytes, std::string& why) {
  namespace pt = boost::property_tree;
  std::istringstream in(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  pt::ptree tree;
  try {
    pt::read_xml(in, tree, pt::xml_parser::no_comments);
  } catch (const pt::xml_parser_error& e) {
    why = std::string("malformed SVG: ") + e.what();
    return false;
  }
  for (const auto& [name, child] : tree) {
    if (name == "<xmlcomment>" || name == "<xmlattr>") continue;
    const auto colon = name.find(':');
    const std::string local = colon == std::string::npos ? name : name.substr(colon + 1);
    if (local == "svg") return true;
    why = "XML root element is <" + name + ">, not <svg>";
    return false;
  }
  why = "SVG document has no root element";
  return false;
}

std::string tail(const std::string& s, std::size_t n) {
  return s.size() <= n ? s : s.substr(s.size() - n);
}

}  // namespace

Validation validate(const RenderOutcome& outcome, const ImageLimits& limits) {
  if (outcome.status != RenderStatus::kOk) {
    return {false, std::string(to_string(outcome.status)) + ": " + tail(outcome.stderr_log, 2000)};
  }
  if (!outcome.image_bytes || outcome.image_bytes->empty()) return {false, "empty image"};
  const auto& bytes = *outcome.image_bytes;
  if (bytes.size() < limits.min_bytes) {
    return {false, "image smaller than " + std::to_string(limits.min_bytes) + " bytes"};
  }
  if (bytes.size() > limits.max_output_bytes) {
    return {false, "image exceeds " + std::to_string(limits.max_output_bytes) + " bytes"};
  }
  switch (sniff_container(bytes)) {
    case ImageContainer::kPng:
      return {true, ""};
    case ImageContainer::kSvg: {
      std::string why;
      if (well_formed_svg(bytes, why)) return {true, ""};
      return {false, why};
    }
    case ImageContainer::kUnknown:
      break;
  }
  return {false, "unsupported image container"};
}

// ------------------------------------------------------------- repair loop

RepairResult repair_loop(const RenderSpec& code, Renderer& renderer,
                         CodeEditorBackend& editor, int max_repairs) {
  if (max_repairs < 0) throw Error(ErrorCode::kInvalidArgument, "max_repairs must be >= 0");
  RepairResult result;
  result.result = RepairBackoff{code, ""};
  RenderSpec current = code;
  for (int attempt = 0;; ++attempt) {
    RenderOutcome outcome;
    if (current.source_text.find_first_not_of(" \t\r\n") == std::string::npos) {
      outcome = RenderOutcome::failed(RenderStatus::kSyntaxError, "empty program");
    } else {
      outcome = renderer.render(current);
      ++result.render_calls;
    }
    const Validation v = validate(outcome, renderer.limits());
    if (v.pass) {
      result.result = RepairSuccess{std::move(current), std::move(*outcome.image_bytes)};
      return result;
    }
    result.failures.push_back(v.reason);
    if (attempt == max_repairs) {
      result.result = RepairBackoff{std::move(current), v.reason};
      return result;
    }
    ++result.editor_calls;
    std::string fixed = editor.fix(current, outcome.stderr_log.empty() ? v.reason : outcome.stderr_log);
    current.source_text = std::move(fixed);
  }
}

std::vector<RenderOutcome> render_all(Renderer& renderer, const std::vector<RenderSpec>& specs,
                                      std::size_t width) {
  ThreadPool pool(std::min(width, std::max<std::size_t>(specs.size(), 1)));
  std::vector<std::future<RenderOutcome>> futures;
  futures.reserve(specs.size());
  for (const auto& s : specs) {
    futures.push_back(pool.submit([&renderer, &s] { return renderer.render(s); }));
  }
  std::vector<RenderOutcome> out;
  out.reserve(specs.size());
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

}  // namespace sketchpipe
