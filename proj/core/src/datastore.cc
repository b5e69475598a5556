// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/datastore.h"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

#include "sketchpipe/error.h"
#include "sketchpipe/hash.h"

namespace fs = std::filesystem;

namespace sketchpipe {

namespace {

[[noreturn]] void io_fail(const std::string& what) {
  throw Error(ErrorCode::kIo, what + ": " + std::strerror(errno));
}

void write_all(int fd, std::string_view data, const std::string& what) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      io_fail(what);
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string unique_suffix() {
  static std::atomic<std::uint64_t> counter{0};
  std::ostringstream os;
  os << ::getpid() << '-' << std::hash<std::thread::id>{}(std::this_thread::get_id())
     << '-' << counter.fetch_add(1);
  return os.str();
}

// Writes `data` to `target` through a sibling temp file and rename(2).
void atomic_write(const fs::path& target, std::string_view data) {
  const fs::path tmp = target.parent_path() /
                       ("." + target.filename().string() + ".tmp-" + unique_suffix());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
  if (fd < 0) io_fail("open " + tmp.string());
  try {
    write_all(fd, data, "write " + tmp.string());
  } catch (...) {
    ::close(fd);
    ::unlink(tmp.c_str());
    throw;
  }
  ::close(fd);
  if (::rename(tmp.c_str(), target.c_str()) != 0) {
    const int saved = errno;
    ::unlink(tmp.c_str());
    errno = saved;
    io_fail("rename " + target.string());
  }
}

std::uint64_t file_size_or_zero(const fs::path& p) {
  std::error_code ec;
  const auto n = fs::file_size(p, ec);
  return ec ? 0 : static_cast<std::uint64_t>(n);
}

struct InstanceTags {
  std::string source;
  std::string discipline;
};

constexpr const char* kUnknownSource = "unknown";
constexpr const char* kUntagged = "untagged";

class FileLock {
 public:
  explicit FileLock(int fd) : fd_(fd) {
    while (::flock(fd_, LOCK_EX) != 0) {
      if (errno != EINTR) io_fail("flock");
    }
  }
  ~FileLock() { ::flock(fd_, LOCK_UN); }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_;
};

}  // namespace

// ---------------------------------------------------------------- BlobStore

BlobStore::BlobStore(fs::path root) : root_(std::move(root)) {}

fs::path BlobStore::path_for(std::string_view digest) const {
  if (!is_hex_digest(digest)) {
    throw Error(ErrorCode::kInvalidArgument,
                "not a sha256 digest: '" + std::string(digest) + "'");
  }
  return root_ / std::string(digest.substr(0, 2)) / std::string(digest);
}

std::string BlobStore::put(std::span<const std::uint8_t> bytes) const {
  if (bytes.empty()) throw Error(ErrorCode::kInvalidArgument, "empty blob");
  std::string digest = sha256_hex(bytes);
  const fs::path target = path_for(digest);
  if (fs::exists(target)) return digest;
  std::error_code ec;
  fs::create_directories(target.parent_path(), ec);
  if (ec) {
    throw Error(ErrorCode::kIo, "create " + target.parent_path().string() +
                                    ": " + ec.message());
  }
  atomic_write(target, std::string_view(
                           reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return digest;
}

std::string BlobStore::put(std::string_view bytes) const {
  return put(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

bool BlobStore::contains(std::string_view digest) const {
  return is_hex_digest(digest) && fs::exists(path_for(digest));
}

std::vector<std::uint8_t> BlobStore::get(std::string_view digest) const {
  const fs::path p = path_for(digest);
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "missing blob " + std::string(digest));
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

// ----------------------------------------------------------------- filters

bool TrajectoryFilter::matches(const Trajectory& t) const {
  if (termination && t.termination != *termination) return false;
  if (instance_id && t.instance_id != *instance_id) return false;
  if (id && t.id != *id) return false;
  return true;
}

TrajectoryFilter TrajectoryFilter::parse(std::string_view expr) {
  TrajectoryFilter f;
  while (!expr.empty()) {
    const auto comma = expr.find(',');
    std::string_view term = expr.substr(0, comma);
    expr = comma == std::string_view::npos ? std::string_view{} : expr.substr(comma + 1);
    if (term.empty()) continue;
    const auto eq = term.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::kInvalidArgument,
                  "filter term needs key=value: '" + std::string(term) + "'");
    }
    const auto key = term.substr(0, eq);
    const auto value = std::string(term.substr(eq + 1));
    if (key == "termination") {
      f.termination = parse_termination(value);
    } else if (key == "instance_id") {
      f.instance_id = value;
    } else if (key == "id") {
      f.id = value;
    } else {
      throw Error(ErrorCode::kInvalidArgument,
                  "unknown filter key '" + std::string(key) + "'");
    }
  }
  return f;
}

// ---------------------------------------------------------------- manifest

nlohmann::json Manifest::to_json() const {
  return {{"schema_version", kSchemaVersion},
          {"trajectories", trajectories},
          {"total_images", total_images},
          {"by_source", by_source},
          {"by_discipline", by_discipline},
          {"by_termination", by_termination},
          {"file_set_digest", file_set_digest}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  m.trajectories = j.at("trajectories").get<std::size_t>();
  m.total_images = j.at("total_images").get<std::size_t>();
  m.by_source = j.at("by_source").get<std::map<std::string, std::size_t>>();
  m.by_discipline = j.at("by_discipline").get<std::map<std::string, std::size_t>>();
  m.by_termination = j.at("by_termination").get<std::map<std::string, std::size_t>>();
  m.file_set_digest = j.at("file_set_digest").get<std::string>();
  return m;
}

std::string chain_digest(std::string_view previous, std::string_view line) {
  std::string buf;
  buf.reserve(previous.size() + line.size());
  buf.append(previous);
  buf.append(line);
  return sha256_hex(std::string_view(buf));
}

// ------------------------------------------------------------------ cursor

TrajectoryCursor::TrajectoryCursor(fs::path log, TrajectoryFilter filter,
                                   CorruptPolicy policy)
    : filter_(std::move(filter)), policy_(policy) {
  if (fs::exists(log)) {
    in_.open(log, std::ios::binary);
    if (!in_) throw Error(ErrorCode::kIo, "cannot open " + log.string());
  }
}

std::optional<Trajectory> TrajectoryCursor::next() {
  if (!in_.is_open()) return std::nullopt;
  std::string line;
  while (std::getline(in_, line)) {
    const std::size_t index = index_++;
    const std::uint64_t offset = offset_;
    offset_ += line.size() + 1;
    if (line.empty()) continue;
    Trajectory t;
    try {
      t = trajectory_from_json(nlohmann::json::parse(line));
      validate_trajectory(t);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kSchemaVersion) throw;
      if (policy_ == CorruptPolicy::kFailFast) {
        throw Error(ErrorCode::kCorruptRecord,
                    "corrupt trajectory record " + std::to_string(index) +
                        " at byte " + std::to_string(offset) + ": " + e.what());
      }
      corruptions_.push_back({index, offset, e.what()});
      continue;
    } catch (const std::exception& e) {
      if (policy_ == CorruptPolicy::kFailFast) {
        throw Error(ErrorCode::kCorruptRecord,
                    "corrupt trajectory record " + std::to_string(index) +
                        " at byte " + std::to_string(offset) + ": " + e.what());
      }
      corruptions_.push_back({index, offset, e.what()});
      continue;
    }
    if (filter_.matches(t)) return t;
  }
  return std::nullopt;
}

// ------------------------------------------------------------------- store

struct Store::State {
  Manifest manifest;
  std::set<std::string> images;
  std::set<std::string> trajectory_ids;
  std::unordered_map<std::string, InstanceTags> instances;
  std::uint64_t log_bytes = 0;
  std::uint64_t instance_bytes = 0;
  std::uint64_t records = 0;  // lines in the log, including corrupt ones

  void reset() { *this = State{}; manifest.file_set_digest = sha256_hex(std::string_view{}); }

  void count(const Trajectory& t) {
    const auto it = instances.find(t.instance_id);
    const std::string source = it == instances.end() ? kUnknownSource : it->second.source;
    const std::string discipline = it == instances.end() ? kUntagged : it->second.discipline;
    ++manifest.trajectories;
    ++manifest.by_source[source];
    ++manifest.by_discipline[discipline];
    ++manifest.by_termination[std::string(to_string(t.termination))];
    for (const auto& s : t.steps) images.insert(s.image_hash);
    manifest.total_images = images.size();
    trajectory_ids.insert(t.id);
  }
};

namespace {

void scan_instances(const fs::path& p,
                    std::unordered_map<std::string, InstanceTags>& out,
                    std::uint64_t& bytes) {
  out.clear();
  bytes = 0;
  std::ifstream in(p, std::ios::binary);
  if (!in) return;
  std::string line;
  while (std::getline(in, line)) {
    bytes += line.size() + 1;
    if (line.empty()) continue;
    try {
      const auto inst = instance_from_json(nlohmann::json::parse(line));
      out.emplace(inst.id, InstanceTags{std::string(to_string(inst.source)),
                                        inst.discipline.value_or(kUntagged)});
    } catch (const std::exception&) {
      // Unreadable instance lines only degrade manifest tags.
    }
  }
}

}  // namespace

Store::Store(fs::path root, StoreOptions options)
    : root_(std::move(root)), options_(options), blobs_(root_ / "blobs"),
      state_(std::make_unique<State>()) {
  std::error_code ec;
  fs::create_directories(root_ / "blobs", ec);
  if (ec) throw Error(ErrorCode::kIo, "create store " + root_.string() + ": " + ec.message());
  const fs::path lock = root_ / "trajectories.lock";
  lock_fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) io_fail("open " + lock.string());
  std::lock_guard guard(mu_);
  FileLock flock(lock_fd_);
  state_->reset();
  refresh_locked();
}

Store::~Store() {
  if (lock_fd_ >= 0) ::close(lock_fd_);
}

fs::path Store::trajectory_log() const { return root_ / "trajectories.jsonl"; }
fs::path Store::manifest_path() const { return root_ / "manifest.json"; }
fs::path Store::instances_path() const { return root_ / "instances.jsonl"; }

void Store::load_instances_locked() const {
  scan_instances(instances_path(), state_->instances, state_->instance_bytes);
}

void Store::refresh_locked() const {
  const bool instances_changed =
      file_size_or_zero(instances_path()) != state_->instance_bytes;
  const bool log_changed = file_size_or_zero(trajectory_log()) != state_->log_bytes;
  if (!instances_changed && !log_changed) return;
  // Another writer touched the files; rebuild everything from disk.
  auto instances = std::move(state_->instances);
  state_->reset();
  state_->instances = std::move(instances);
  load_instances_locked();

  std::ifstream in(trajectory_log(), std::ios::binary);
  std::string line;
  while (in && std::getline(in, line)) {
    state_->log_bytes += line.size() + 1;
    ++state_->records;
    state_->manifest.file_set_digest = chain_digest(state_->manifest.file_set_digest, line);
    try {
      auto t = trajectory_from_json(nlohmann::json::parse(line));
      validate_trajectory(t);
      state_->count(t);
    } catch (const std::exception&) {
      // Corrupt records are excluded from counts; readers report them.
    }
  }
}

void Store::write_manifest_locked() {
  atomic_write(manifest_path(), state_->manifest.to_json().dump(2) + "\n");
}

std::uint64_t Store::append_trajectory(const Trajectory& t) {
  validate_trajectory(t);
  const std::string line = to_json(t).dump();

  std::lock_guard guard(mu_);
  FileLock flock(lock_fd_);
  refresh_locked();
  if (state_->trajectory_ids.contains(t.id)) {
    throw Error(ErrorCode::kInvariantViolation,
                "trajectory id '" + t.id + "' already stored");
  }
  if (!state_->instances.contains(t.instance_id)) load_instances_locked();

  const int fd = ::open(trajectory_log().c_str(),
                        O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) io_fail("open " + trajectory_log().string());
  try {
    write_all(fd, line + "\n", "append trajectory");
    if (options_.fsync_appends && ::fsync(fd) != 0) io_fail("fsync");
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);

  const std::uint64_t index = state_->records++;
  state_->log_bytes += line.size() + 1;
  state_->manifest.file_set_digest = chain_digest(state_->manifest.file_set_digest, line);
  state_->count(t);
  write_manifest_locked();
  return index;
}

TrajectoryCursor Store::load_all(TrajectoryFilter filter) const {
  return TrajectoryCursor(trajectory_log(), std::move(filter), options_.corrupt_policy);
}

std::vector<Trajectory> Store::load_all_vector(TrajectoryFilter filter) const {
  auto cursor = load_all(std::move(filter));
  std::vector<Trajectory> out;
  while (auto t = cursor.next()) out.push_back(std::move(*t));
  return out;
}

bool Store::put_instance(const VQAInstance& inst) {
  validate_instance(inst);
  const std::string line = to_json(inst).dump();
  std::lock_guard guard(mu_);
  FileLock flock(lock_fd_);
  refresh_locked();
  if (state_->instances.contains(inst.id)) return false;
  const int fd = ::open(instances_path().c_str(),
                        O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) io_fail("open " + instances_path().string());
  try {
    write_all(fd, line + "\n", "append instance");
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  state_->instance_bytes += line.size() + 1;
  state_->instances.emplace(inst.id, InstanceTags{std::string(to_string(inst.source)),
                                                  inst.discipline.value_or(kUntagged)});
  if (state_->manifest.by_source.contains(kUnknownSource)) {
    // Earlier records may reference this instance; recount them.
    state_->log_bytes = std::numeric_limits<std::uint64_t>::max();
    refresh_locked();
    write_manifest_locked();
  }
  return true;
}

std::vector<VQAInstance> Store::load_instances() const {
  std::vector<VQAInstance> out;
  std::ifstream in(instances_path(), std::ios::binary);
  std::string line;
  std::size_t index = 0;
  while (in && std::getline(in, line)) {
    ++index;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kCorruptRecord, "corrupt instance record " +
                                                 std::to_string(index - 1) + ": " + e.what());
    }
  }
  return out;
}

std::optional<VQAInstance> Store::find_instance(std::string_view id) const {
  for (auto& inst : load_instances()) {
    if (inst.id == id) return inst;
  }
  return std::nullopt;
}

bool Store::has_trajectory(std::string_view id) const {
  std::lock_guard guard(mu_);
  FileLock flock(lock_fd_);
  refresh_locked();
  return state_->trajectory_ids.contains(std::string(id));
}

Manifest Store::manifest() const {
  std::lock_guard guard(mu_);
  return state_->manifest;
}

Manifest Store::rescan() const {
  State fresh;
  fresh.reset();
  scan_instances(instances_path(), fresh.instances, fresh.instance_bytes);
  std::ifstream in(trajectory_log(), std::ios::binary);
  std::string line;
  while (in && std::getline(in, line)) {
    fresh.manifest.file_set_digest = chain_digest(fresh.manifest.file_set_digest, line);
    try {
      auto t = trajectory_from_json(nlohmann::json::parse(line));
      validate_trajectory(t);
      fresh.count(t);
    } catch (const std::exception&) {
    }
  }
  return fresh.manifest;
}

}  // namespace sketchpipe
