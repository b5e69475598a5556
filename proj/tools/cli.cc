// SPDX-License-Identifier: Apache-2.0
#include "cli.h"

#include <atomic>
#include <csignal>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "pipeline_config.h"
#include "sketchpipe/error.h"
#include "sketchpipe/kernel_selfcheck.h"
#include "sketchpipe/log.h"
#include "sketchpipe/stats.h"
#include "sketchpipe/thread_pool.h"
#include "sketchpipe/trainset.h"

namespace sketchpipe::cli {

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

// Installs the drain handler for the lifetime of a command.
class InterruptScope {
 public:
  InterruptScope() {
    g_interrupted.store(false);
    struct sigaction sa {};
    sa.sa_handler = on_sigint;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGINT, &sa, &previous_);
  }
  ~InterruptScope() { sigaction(SIGINT, &previous_, nullptr); }

 private:
  struct sigaction previous_ {};
};

struct Globals {
  std::string config;
  std::string store;
  std::optional<std::size_t> parallelism;
  std::optional<std::size_t> limit;
  bool dry_run = false;
};

struct Context {
  PipelineConfig cfg;
  std::filesystem::path store_root;
  std::size_t width = 1;
  std::optional<std::size_t> limit;
  bool dry_run = false;
};

Context make_context(const Globals& g) {
  Context ctx;
  if (!g.config.empty()) {
    ctx.cfg = PipelineConfig::load(g.config);
  } else {
    ctx.cfg = PipelineConfig::from_json(nlohmann::json::object(), std::filesystem::current_path());
  }
  ctx.store_root = g.store.empty() ? ctx.cfg.resolve(ctx.cfg.store) : std::filesystem::path(g.store);
  ctx.width = g.parallelism.value_or(ctx.cfg.parallelism);
  if (ctx.width == 0) throw Error(ErrorCode::kConfig, "--parallelism must be >= 1");
  ctx.limit = g.limit;
  ctx.dry_run = g.dry_run;
  return ctx;
}

void print(const nlohmann::json& j) { std::cout << j.dump() << std::endl; }

std::filesystem::path out_dir(const Context& ctx, const std::string& flag) {
  return flag.empty() ? ctx.cfg.resolve(ctx.cfg.out) : std::filesystem::path(flag);
}

// Order-preserving map over `n` items on `width` workers.
template <typename T, typename F>
std::vector<T> ordered_map(std::size_t n, std::size_t width, F&& fn) {
  std::vector<T> out;
  out.reserve(n);
  if (width <= 1) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(fn(i));
    return out;
  }
  ThreadPool pool(width);
  std::vector<std::future<T>> futures;
  for (std::size_t i = 0; i < n; ++i) futures.push_back(pool.submit([&fn, i] { return fn(i); }));
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

std::size_t effective_width(const Context& ctx, const BackendRegistry& reg,
                            const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (reg.scripted(n)) {
      if (ctx.width > 1) log::info("scripted backend in use; running sequentially", {{"backend", n}});
      return 1;
    }
  }
  return ctx.width;
}

void require_backend(const PipelineConfig& cfg, const std::string& name, const char* role) {
  if (!cfg.backends.count(name)) {
    throw Error(ErrorCode::kConfig, std::string(role) + " backend '" + name + "' is not configured");
  }
}

void require_profiles(const PipelineConfig& cfg, const std::vector<VQAInstance>& instances) {
  for (const auto& inst : instances) cfg.renderer.profile(inst.code.renderer_profile);
}

// ------------------------------------------------------------------- curate

int cmd_curate(const Context& ctx, const std::string& instances_flag, const std::string& out_flag) {
  const auto& cfg = ctx.cfg;
  const auto path = instances_flag.empty() ? cfg.resolve(cfg.instances) : std::filesystem::path(instances_flag);
  std::vector<VQAInstance> instances = read_instances(path);
  if (ctx.limit && instances.size() > *ctx.limit) instances.resize(*ctx.limit);
  require_profiles(cfg, instances);
  require_backend(cfg, cfg.solver_backend, "solver");
  require_backend(cfg, cfg.editor_backend, "editor");
  cfg.episode.validate();

  Store store(ctx.store_root);
  SandboxRenderer renderer(cfg.renderer);
  if (ctx.dry_run) {
    nlohmann::json summary{{"dry_run", true}, {"instances", instances.size()}};
    if (!instances.empty()) {
      summary["rendered"] = instances.front().id;
      summary["image_hash"] = render_initial_image(instances.front(), renderer, store.blobs());
    }
    print(summary);
    return kExitOk;
  }

  BackendRegistry registry(cfg, store.blobs());
  auto solver = registry.get(cfg.solver_backend);
  auto editor = registry.get(cfg.editor_backend);
  const std::size_t width = effective_width(ctx, registry, {cfg.solver_backend, cfg.editor_backend});
  const auto events_dir = out_dir(ctx, out_flag) / "events";

  InterruptScope interrupt;
  std::mutex summary_mu;
  std::map<std::string, std::size_t> by_termination;
  std::size_t skipped = 0, failures = 0, not_started = 0;

  auto run_one = [&](std::size_t i) -> int {
    const VQAInstance& inst = instances[i];
    const std::string id = "traj-" + inst.id;
    if (store.has_trajectory(id)) {
      std::lock_guard lock(summary_mu);
      ++skipped;
      return 0;
    }
    if (g_interrupted.load()) {
      std::lock_guard lock(summary_mu);
      ++not_started;
      return 0;
    }
    try {
      EpisodeResult r = run_episode(inst, *solver, *editor, renderer, store.blobs(), cfg.episode, id);
      VQAInstance rendered = inst;
      rendered.image_hash = r.trajectory.steps.front().image_hash;
      store.put_instance(rendered);
      store.append_trajectory(r.trajectory);
      write_jsonl(events_dir / (id + ".jsonl"), r.events);
      std::lock_guard lock(summary_mu);
      ++by_termination[std::string(to_string(r.trajectory.termination))];
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kConfig || e.code() == ErrorCode::kProfileNotFound) throw;
      log::error("episode failed", {{"instance_id", inst.id}, {"code", std::string(error_code_name(e.code()))},
                                    {"error", e.what()}});
      std::lock_guard lock(summary_mu);
      ++failures;
    }
    return 0;
  };
  ordered_map<int>(instances.size(), width, run_one);

  nlohmann::json summary{{"instances", instances.size()}, {"skipped", skipped},
                         {"failures", failures},         {"interrupted", g_interrupted.load()},
                         {"not_started", not_started}};
  for (const auto t : {Termination::kAnswered, Termination::kMaxSteps, Termination::kRenderFailureBackoff,
                       Termination::kBackendError}) {
    const std::string name(to_string(t));
    summary[name] = by_termination.count(name) ? by_termination[name] : 0;
  }
  print(summary);
  return failures > 0 ? kExitRuntime : kExitOk;
}

// ------------------------------------------------------------------- filter

std::vector<NamedBackend> named(BackendRegistry& reg, const std::vector<std::string>& names,
                                std::vector<std::shared_ptr<ChatBackend>>& keep_alive) {
  std::vector<NamedBackend> out;
  for (const auto& n : names) {
    keep_alive.push_back(reg.get(n));
    out.push_back({n, keep_alive.back().get()});
  }
  return out;
}

int cmd_filter(const Context& ctx, const std::string& kind, const std::string& in_flag,
               const std::string& out_flag) {
  const auto& cfg = ctx.cfg;
  const nlohmann::json section = cfg.filter.value(kind, nlohmann::json::object());
  Store store(ctx.store_root);
  std::vector<VQAInstance> instances =
      in_flag.empty() ? store.load_instances() : read_instances(in_flag);
  if (ctx.limit && instances.size() > *ctx.limit) instances.resize(*ctx.limit);

  std::vector<std::string> names;
  ConsensusConfig consensus;
  Img2CodeConfig img2code;
  RejectionConfig rejection;
  try {
    if (kind == "consensus") {
      consensus = ConsensusConfig::from_json(section);
      names = consensus.experts;
    } else if (kind == "img2code") {
      img2code = Img2CodeConfig::from_json(section);
      names = section.value("solvers", std::vector<std::string>{});
      if (names.empty()) throw Error(ErrorCode::kConfig, "img2code needs filter.img2code.solvers");
    } else {
      rejection = RejectionConfig::from_json(section);
      names = {section.value("base", std::string("base"))};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("filter config: ") + e.what());
  }
  for (const auto& n : names) require_backend(cfg, n, kind.c_str());
  require_profiles(cfg, instances);

  const auto out = out_dir(ctx, out_flag);
  if (instances.empty()) {
    log::warn("filter input is empty", {{"filter", kind}});
    write_jsonl(out / "filter-report.jsonl", {});
    write_jsonl(out / "retained.jsonl", {});
    print({{"filter", kind}, {"input", 0}, {"keep", 0}, {"discard", 0}, {"undecided", 0}});
    return kExitOk;
  }

  BackendRegistry registry(cfg, store.blobs());
  std::vector<std::shared_ptr<ChatBackend>> alive;
  const std::vector<NamedBackend> backends = named(registry, names, alive);
  const std::size_t width = effective_width(ctx, registry, names);
  SandboxRenderer renderer(cfg.renderer);

  auto decide = [&](std::size_t i) -> FilterRecord {
    VQAInstance inst = instances[i];
    if (kind == "img2code") {
      const RenderOutcome r = renderer.render(inst.code);
      const Validation v = validate(r, renderer.limits());
      if (!v.pass) {
        FilterRecord rec;
        rec.instance_id = inst.id;
        rec.filter = kind;
        rec.decision = Decision::kDiscard;
        rec.error = "re-render failed: " + v.reason;
        return rec;
      }
      return img2code_accept(inst, store.blobs().put(std::span<const std::uint8_t>(*r.image_bytes)),
                             backends, img2code);
    }
    if (inst.image_hash.empty() || !store.blobs().contains(inst.image_hash)) {
      inst.image_hash = render_initial_image(inst, renderer, store.blobs());
    }
    return kind == "consensus" ? consensus_filter(inst, backends, consensus)
                               : rejection_decision(inst, backends.front(), rejection);
  };
  const std::vector<FilterRecord> records = ordered_map<FilterRecord>(instances.size(), width, decide);

  std::vector<nlohmann::json> report, retained;
  std::map<std::string, std::size_t> counts{{"keep", 0}, {"discard", 0}, {"undecided", 0}};
  for (std::size_t i = 0; i < records.size(); ++i) {
    report.push_back(records[i].to_json());
    ++counts[std::string(to_string(records[i].decision))];
    if (records[i].decision == Decision::kKeep) retained.push_back(to_json(instances[i]));
  }
  write_jsonl(out / "filter-report.jsonl", report);
  write_jsonl(out / "retained.jsonl", retained);
  print({{"filter", kind}, {"input", instances.size()}, {"keep", counts["keep"]},
         {"discard", counts["discard"]}, {"undecided", counts["undecided"]}});
  return kExitOk;
}

// ------------------------------------------------------------------- export

int cmd_export(const Context& ctx, const std::string& out_flag, const std::string& phase_flag) {
  const auto& cfg = ctx.cfg;
  const TrainPhase phase = phase_flag.empty() ? cfg.phase : parse_train_phase(phase_flag);
  Store store(ctx.store_root);
  const std::vector<Trajectory> trajectories = store.load_all_vector();
  if (trajectories.empty()) {
    log::error("store has no trajectories", {{"store", ctx.store_root.string()}});
    return kExitRuntime;
  }
  std::vector<TrainingExample> examples;
  std::size_t skipped = 0;
  for (const auto& t : trajectories) {
    if (!t.final_answer) {
      ++skipped;
      continue;
    }
    const auto inst = store.find_instance(t.instance_id);
    if (!inst) {
      log::warn("trajectory references a missing instance", {{"trajectory_id", t.id}});
      ++skipped;
      continue;
    }
    TrainingExample e = standardize(t, *inst, cfg.episode.templates, cfg.trainset);
    apply_mask(e, phase);
    examples.push_back(std::move(e));
  }
  LossWeights w;
  try {
    w = aggregate_loss_weights(examples);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyInput) throw;
    log::error("export produced no supervised tokens", {{"examples", examples.size()}, {"skipped", skipped}});
    return kExitRuntime;
  }
  std::vector<nlohmann::json> rows;
  std::size_t total_tokens = 0;
  std::map<std::string, std::size_t> per_role;
  for (const auto& e : examples) {
    rows.push_back(to_json(e));
    total_tokens += e.size();
    for (const auto& [role, n] : build_mask(e, phase).stats.per_role) per_role[std::string(to_string(role))] += n;
  }
  std::size_t supervised = 0;
  for (const auto n : w.supervised) supervised += n;
  write_jsonl(out_dir(ctx, out_flag) / "trainset.jsonl", rows);
  print({{"examples", examples.size()}, {"skipped", skipped}, {"supervised", supervised},
         {"total_tokens", total_tokens}, {"normalizer", w.normalizer}, {"per_role", per_role},
         {"phase", std::string(to_string(phase))}});
  return kExitOk;
}

// -------------------------------------------------------------------- stats

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

int cmd_stats(const Context& ctx, const std::string& out_flag, const std::string& actions_flag) {
  const auto& cfg = ctx.cfg;
  std::optional<ActionTaxonomy> custom;
  if (cfg.taxonomy) {
    std::ifstream in(cfg.resolve(*cfg.taxonomy));
    if (!in) throw Error(ErrorCode::kConfig, "cannot read taxonomy " + cfg.taxonomy->string());
    try {
      custom = ActionTaxonomy::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfig, std::string("taxonomy: ") + e.what());
    }
  }
  const ActionTaxonomy& taxonomy = custom ? *custom : ActionTaxonomy::builtin();

  nlohmann::json report{{"taxonomy", taxonomy.to_json()}};
  std::vector<std::string> actions;
  if (!actions_flag.empty()) {
    actions = read_lines(actions_flag);
  } else {
    Store store(ctx.store_root);
    const auto trajectories = store.load_all_vector();
    if (trajectories.empty()) {
      log::error("store has no trajectories", {{"store", ctx.store_root.string()}});
      return kExitRuntime;
    }
    actions = collect_actions(trajectories);
    const Manifest m = store.manifest();
    report["trajectories"] = trajectory_stats(trajectories).to_json();
    report["disciplines"] = m.by_discipline;
    report["sources"] = m.by_source;
  }
  if (actions.empty()) {
    log::error("no edit requests to summarize");
    return kExitRuntime;
  }
  const DistributionReport dist = distribution(actions, taxonomy);
  report["actions"] = dist.to_json();

  const auto out = out_dir(ctx, out_flag);
  std::filesystem::create_directories(out);
  std::ofstream(out / "stats.json", std::ios::trunc) << report.dump(2) << "\n";
  std::ofstream(out / "stats.csv", std::ios::trunc) << dist.to_csv();
  print(report.contains("trajectories")
            ? nlohmann::json{{"actions", dist.to_json()}, {"trajectories", report["trajectories"]}}
            : nlohmann::json{{"actions", dist.to_json()}});
  return kExitOk;
}

// ---------------------------------------------------------- kernel / replay

int cmd_kernel_selfcheck(std::uint64_t seed, int configs, bool corrupt) {
  kernel::SelfcheckOptions opts;
  opts.seed = seed;
  opts.gradient_configs = configs;
  opts.grad.corrupt_gradient = corrupt;
  const nlohmann::json report = kernel::run_selfcheck(opts);
  print(report);
  if (report.at("pass").get<bool>()) return kExitOk;
  for (const char* prop : {"identity", "pooling", "gradient"}) {
    if (!report.at(prop).at("pass").get<bool>()) log::error("kernel property failed", {{"property", prop}});
  }
  return kExitRuntime;
}

int cmd_replay(const Context& ctx, const std::string& id, const std::string& out_flag) {
  Store store(ctx.store_root);
  TrajectoryFilter filter;
  filter.id = id;
  const auto found = store.load_all_vector(filter);
  if (found.empty()) {
    log::error("no such episode", {{"id", id}});
    return kExitRuntime;
  }
  nlohmann::json events = nlohmann::json::array();
  std::ifstream in(out_dir(ctx, out_flag) / "events" / (id + ".jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) events.push_back(nlohmann::json::parse(line));
  }
  print({{"trajectory", to_json(found.front())}, {"events", events}});
  return kExitOk;
}

int exit_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kConfig:
    case ErrorCode::kProfileNotFound:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Code-rendered visual reasoning data pipeline", "sketchpipe"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Pipeline config (JSON)");
  app.add_option("--store", g.store, "Store root (overrides paths.store)");
  app.add_option("--parallelism", g.parallelism, "Worker width")->check(CLI::PositiveNumber);
  app.add_option("--limit", g.limit, "Process at most N instances");
  app.add_flag("--dry-run", g.dry_run, "Validate config and render instance 0 without backend calls");
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug|info|warn|error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  std::string instances_flag, out_flag, in_flag, actions_flag, phase_flag, replay_id;
  auto* curate = app.add_subcommand("curate", "Run the Solver/Code Editor loop over instances");
  curate->add_option("--instances", instances_flag, "Instances JSONL (overrides paths.instances)");
  curate->add_option("--out", out_flag, "Output directory for event logs");

  auto* filter = app.add_subcommand("filter", "Apply a quality filter");
  filter->require_subcommand(1);
  std::string filter_kind;
  for (const char* kind : {"consensus", "rejection", "img2code"}) {
    auto* sub = filter->add_subcommand(kind);
    sub->add_option("--in", in_flag, "Instances JSONL (default: store instances)");
    sub->add_option("--out", out_flag, "Output directory");
    sub->callback([&filter_kind, kind] { filter_kind = kind; });
  }

  auto* exporter = app.add_subcommand("export", "Write trainset.jsonl from the store");
  exporter->add_option("--out", out_flag, "Output directory");
  exporter->add_option("--phase", phase_flag, "phase1|phase2")->check(CLI::IsMember({"phase1", "phase2"}));

  auto* stats = app.add_subcommand("stats", "Category distribution and trajectory statistics");
  stats->add_option("--out", out_flag, "Output directory");
  stats->add_option("--actions", actions_flag, "One edit request per line instead of the store");

  std::uint64_t seed = 20240601;
  int configs = 20;
  bool corrupt = false;
  auto* selfcheck = app.add_subcommand("kernel-selfcheck", "Verify the editor kernel numerics");
  selfcheck->add_option("--seed", seed, "RNG seed");
  selfcheck->add_option("--configs", configs, "Random gradient-check configurations")->check(CLI::PositiveNumber);
  selfcheck->add_flag("--corrupt-gradient", corrupt)->group("");

  auto* replay = app.add_subcommand("replay", "Print a stored episode and its event log");
  replay->add_option("episode_id", replay_id, "Trajectory id")->required();
  replay->add_option("--out", out_flag, "Output directory holding events/");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  log::set_min_level(log_level == "debug"  ? log::Level::kDebug
                     : log_level == "warn" ? log::Level::kWarn
                     : log_level == "error" ? log::Level::kError
                                            : log::Level::kInfo);
  try {
    if (*selfcheck) return cmd_kernel_selfcheck(seed, configs, corrupt);
    const Context ctx = make_context(g);
    if (*curate) return cmd_curate(ctx, instances_flag, out_flag);
    if (*filter) return cmd_filter(ctx, filter_kind, in_flag, out_flag);
    if (*exporter) return cmd_export(ctx, out_flag, phase_flag);
    if (*stats) return cmd_stats(ctx, out_flag, actions_flag);
    if (*replay) return cmd_replay(ctx, replay_id, out_flag);
  } catch (const Error& e) {
    log::error(e.what(), {{"code", std::string(error_code_name(e.code()))}});
    return exit_for(e);
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"sketchpipe"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace sketchpipe::cli
