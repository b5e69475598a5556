// SPDX-License-Identifier: Apache-2.0
//
// Content-addressed blob store plus the append-only trajectory log.
//
// Layout under the store root:
//   blobs/<first 2 hex>/<sha256>   opaque image / program bytes
//   instances.jsonl                one VQAInstance per line
//   trajectories.jsonl             one Trajectory per line
//   manifest.json                  counters + log digest, rewritten per append
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/types.h"

namespace sketchpipe {

class BlobStore {
 public:
  explicit BlobStore(std::filesystem::path root);

  /// Stores bytes under their SHA-256 digest. Idempotent; safe across
  /// processes because the final name is reached through an atomic rename.
  std::string put(std::span<const std::uint8_t> bytes) const;
  std::string put(std::string_view bytes) const;

  bool contains(std::string_view digest) const;
  std::vector<std::uint8_t> get(std::string_view digest) const;
  std::filesystem::path path_for(std::string_view digest) const;

 private:
  std::filesystem::path root_;
};

enum class CorruptPolicy { kFailFast, kSkipWithReport };

struct CorruptionReport {
  std::size_t record_index = 0;  // 0-based line number
  std::uint64_t byte_offset = 0;
  std::string reason;
};

/// Conjunction of optional field constraints.
struct TrajectoryFilter {
  std::optional<Termination> termination;
  std::optional<std::string> instance_id;
  std::optional<std::string> id;

  bool matches(const Trajectory& t) const;
  /// Parses "termination=answered,instance_id=foo"; empty string matches all.
  static TrajectoryFilter parse(std::string_view expr);
};

struct Manifest {
  std::size_t trajectories = 0;
  std::size_t total_images = 0;  // distinct image digests referenced
  std::map<std::string, std::size_t> by_source;
  std::map<std::string, std::size_t> by_discipline;
  std::map<std::string, std::size_t> by_termination;
  std::string file_set_digest;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  bool operator==(const Manifest&) const = default;
};

/// Hash chain over the raw record lines of the trajectory log:
/// d0 = sha256(""), d_n = sha256(d_{n-1} || line_n).
std::string chain_digest(std::string_view previous, std::string_view line);

/// Streams trajectory records in append order. Never mutates the log.
class TrajectoryCursor {
 public:
  TrajectoryCursor(std::filesystem::path log, TrajectoryFilter filter,
                   CorruptPolicy policy);

  std::optional<Trajectory> next();
  const std::vector<CorruptionReport>& corruptions() const {
    return corruptions_;
  }

 private:
  std::ifstream in_;
  TrajectoryFilter filter_;
  CorruptPolicy policy_;
  std::size_t index_ = 0;
  std::uint64_t offset_ = 0;
  std::vector<CorruptionReport> corruptions_;
};

struct StoreOptions {
  CorruptPolicy corrupt_policy = CorruptPolicy::kFailFast;
  bool fsync_appends = false;
};

class Store {
 public:
  /// Opens (creating if needed) a store rooted at `root`.
  explicit Store(std::filesystem::path root, StoreOptions options = {});
  ~Store();

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const std::filesystem::path& root() const { return root_; }
  const BlobStore& blobs() const { return blobs_; }

  std::string put_image(std::span<const std::uint8_t> bytes) const {
    return blobs_.put(bytes);
  }

  /// Validates, appends one record and rewrites manifest.json under the
  /// writer lock. Returns the 0-based record index.
  std::uint64_t append_trajectory(const Trajectory& t);

  TrajectoryCursor load_all(TrajectoryFilter filter = {}) const;
  std::vector<Trajectory> load_all_vector(TrajectoryFilter filter = {}) const;

  /// Appends the instance unless an instance with the same id exists.
  /// Returns false when it was already present.
  bool put_instance(const VQAInstance& inst);
  std::vector<VQAInstance> load_instances() const;
  std::optional<VQAInstance> find_instance(std::string_view id) const;

  bool has_trajectory(std::string_view id) const;

  Manifest manifest() const;
  /// Recomputes the manifest from the files on disk.
  Manifest rescan() const;

  std::filesystem::path trajectory_log() const;
  std::filesystem::path manifest_path() const;
  std::filesystem::path instances_path() const;

 private:
  struct State;

  void refresh_locked() const;
  void load_instances_locked() const;
  void write_manifest_locked();

  std::filesystem::path root_;
  StoreOptions options_;
  BlobStore blobs_;
  mutable std::mutex mu_;
  std::unique_ptr<State> state_;
  int lock_fd_ = -1;
};

}  // namespace sketchpipe
