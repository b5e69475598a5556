// SPDX-License-Identifier: Apache-2.0
//
// Dataset analytics: the edit-request category distribution, discipline
// coverage and trajectory shape statistics.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchpipe/types.h"

namespace sketchpipe {

/// Ordered keyword rules; the first category with a whole-word,
/// case-insensitive keyword hit wins, otherwise the fallback category.
class ActionTaxonomy {
 public:
  struct Rule {
    std::string category;
    std::vector<std::string> keywords;
  };

  ActionTaxonomy(std::vector<Rule> rules, std::string fallback);

  /// The shipped rule set ({"categories":[{"name","keywords"}],"fallback"}).
  static const ActionTaxonomy& builtin();
  static nlohmann::json builtin_json();
  static ActionTaxonomy from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Total: never throws for non-empty text; blank text is the fallback.
  const std::string& classify(std::string_view instruction) const;

  /// Categories in rule order, fallback last.
  std::vector<std::string> categories() const;
  const std::string& fallback() const { return fallback_; }

 private:
  std::vector<Rule> rules_;
  std::vector<std::regex> patterns_;
  std::string fallback_;
};

struct DistributionRow {
  std::size_t rank = 0;
  std::string category;
  std::uint64_t count = 0;
  std::uint64_t share_tenths = 0;  // share in tenths of a percent

  double share() const { return static_cast<double>(share_tenths) / 10.0; }
  bool operator==(const DistributionRow&) const = default;
};

struct DistributionReport {
  std::vector<DistributionRow> rows;
  std::uint64_t total = 0;

  nlohmann::json to_json() const;
  /// Rank,Category,Count,Share plus a Total row.
  std::string to_csv() const;
};

/// round-half-up(100 * count / total, 1 decimal), in tenths, exact.
std::uint64_t share_tenths(std::uint64_t count, std::uint64_t total);
std::string format_tenths(std::uint64_t tenths);

/// Rows sorted by count (descending, ties in `category_order`), with
/// `fallback` last. Throws Error(kEmptyInput) when the total is zero.
DistributionReport distribution_from_counts(const std::map<std::string, std::uint64_t>& counts,
                                            const std::vector<std::string>& category_order,
                                            const std::string& fallback);

DistributionReport distribution(const std::vector<std::string>& actions,
                                const ActionTaxonomy& taxonomy = ActionTaxonomy::builtin());

struct TrajectoryStats {
  std::size_t trajectories = 0;
  std::map<std::size_t, std::size_t> step_histogram;
  std::size_t edits = 0;         // steps carrying an edit request
  std::size_t failed_edits = 0;  // of which backed off
  std::map<std::string, std::size_t> termination;
  std::set<std::string> images;

  void add(const Trajectory& t);
  /// Associative merge for parallel folds.
  void merge(const TrajectoryStats& other);
  double edits_mean() const;
  nlohmann::json to_json() const;
};

TrajectoryStats trajectory_stats(const std::vector<Trajectory>& trajectories);

/// Every edit request instruction in trajectory order.
std::vector<std::string> collect_actions(const std::vector<Trajectory>& trajectories);

}  // namespace sketchpipe
