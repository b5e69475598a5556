// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/stats.h"

#include <algorithm>
#include <sstream>

#include "sketchpipe/error.h"

namespace sketchpipe {

namespace {

// Whole words only: "label" does not match "labels".
constexpr const char* kBuiltinTaxonomy = R"({
  "fallback": "Others",
  "categories": [
    {"name": "Labeling/Annotation",
     "keywords": ["label", "labeled", "labelled", "labeling", "labelling", "annotate",
                  "annotated", "annotation", "annotations", "caption", "tag", "write",
                  "text", "name", "number the"]},
    {"name": "Highlighting",
     "keywords": ["highlight", "highlighted", "highlights", "highlighting", "emphasize",
                  "emphasise", "emphasized", "shade", "shaded", "shading", "bold",
                  "thicken", "thicker", "glow"]},
    {"name": "Color Operations",
     "keywords": ["color", "colour", "colored", "coloured", "recolor", "recolour", "red",
                  "blue", "green", "yellow", "orange", "purple", "pink", "black", "gray",
                  "grey", "cyan", "magenta"]},
    {"name": "Circle Drawing",
     "keywords": ["circle", "circles", "circled", "encircle", "ring", "circumscribe",
                  "inscribe"]},
    {"name": "Line Drawing",
     "keywords": ["line", "lines", "segment", "segments", "tangent", "perpendicular",
                  "bisector", "connect", "connecting", "arrow", "arrows", "ray", "diagonal",
                  "dashed"]},
    {"name": "Point Marking",
     "keywords": ["point", "points", "mark", "marked", "marker", "dot", "dots", "vertex",
                  "vertices", "intersection", "midpoint"]},
    {"name": "Area/Region Operations",
     "keywords": ["area", "areas", "region", "regions", "fill", "filled", "zone", "crop",
                  "zoom", "sector"]},
    {"name": "Shape Drawing",
     "keywords": ["triangle", "rectangle", "square", "polygon", "box", "ellipse", "shape",
                  "parallelogram", "trapezoid", "hexagon"]}
  ]
})";

std::string regex_escape(std::string_view s) {
  static const std::string kSpecial = R"(\^$.|?*+()[]{})";
  std::string out;
  for (const char c : s) {
    if (kSpecial.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

std::regex compile(const std::vector<std::string>& keywords) {
  std::string alt;
  for (const auto& k : keywords) {
    if (!alt.empty()) alt += '|';
    alt += regex_escape(k);
  }
  return std::regex("(^|[^A-Za-z0-9_])(" + alt + ")($|[^A-Za-z0-9_])",
                    std::regex::icase | std::regex::ECMAScript | std::regex::optimize);
}

}  // namespace

ActionTaxonomy::ActionTaxonomy(std::vector<Rule> rules, std::string fallback)
    : rules_(std::move(rules)), fallback_(std::move(fallback)) {
  if (fallback_.empty()) throw Error(ErrorCode::kConfig, "taxonomy needs a fallback category");
  std::set<std::string> seen{fallback_};
  for (const auto& r : rules_) {
    if (r.category.empty() || r.keywords.empty()) {
      throw Error(ErrorCode::kConfig, "taxonomy rule needs a name and at least one keyword");
    }
    if (!seen.insert(r.category).second) {
      throw Error(ErrorCode::kConfig, "duplicate taxonomy category '" + r.category + "'");
    }
    patterns_.push_back(compile(r.keywords));
  }
}

nlohmann::json ActionTaxonomy::builtin_json() { return nlohmann::json::parse(kBuiltinTaxonomy); }

const ActionTaxonomy& ActionTaxonomy::builtin() {
  static const ActionTaxonomy t = from_json(builtin_json());
  return t;
}

ActionTaxonomy ActionTaxonomy::from_json(const nlohmann::json& j) {
  try {
    std::vector<Rule> rules;
    for (const auto& c : j.at("categories")) {
      rules.push_back({c.at("name").get<std::string>(), c.at("keywords").get<std::vector<std::string>>()});
    }
    return ActionTaxonomy(std::move(rules), j.value("fallback", "Others"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("taxonomy: ") + e.what());
  }
}

nlohmann::json ActionTaxonomy::to_json() const {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& r : rules_) cats.push_back({{"name", r.category}, {"keywords", r.keywords}});
  return {{"fallback", fallback_}, {"categories", cats}};
}

const std::string& ActionTaxonomy::classify(std::string_view instruction) const {
  const std::string text(instruction);
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    if (std::regex_search(text, patterns_[i])) return rules_[i].category;
  }
  return fallback_;
}

std::vector<std::string> ActionTaxonomy::categories() const {
  std::vector<std::string> out;
  for (const auto& r : rules_) out.push_back(r.category);
  out.push_back(fallback_);
  return out;
}

std::uint64_t share_tenths(std::uint64_t count, std::uint64_t total) {
  if (total == 0) throw Error(ErrorCode::kEmptyInput, "share of an empty total");
  // floor(1000 * count / total + 1/2)
  return (2000 * count + total) / (2 * total);
}

std::string format_tenths(std::uint64_t tenths) {
  return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10);
}

DistributionReport distribution_from_counts(const std::map<std::string, std::uint64_t>& counts,
                                            const std::vector<std::string>& category_order,
                                            const std::string& fallback) {
  DistributionReport r;
  for (const auto& [_, c] : counts) r.total += c;
  if (r.total == 0) throw Error(ErrorCode::kEmptyInput, "no actions to summarize");

  auto order_of = [&](const std::string& name) {
    const auto it = std::find(category_order.begin(), category_order.end(), name);
    return static_cast<std::size_t>(it - category_order.begin());
  };
  std::vector<std::pair<std::string, std::uint64_t>> rows;
  for (const auto& name : category_order) {
    if (name != fallback) rows.emplace_back(name, counts.count(name) ? counts.at(name) : 0);
  }
  for (const auto& [name, c] : counts) {
    if (name != fallback && order_of(name) == category_order.size()) rows.emplace_back(name, c);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  rows.emplace_back(fallback, counts.count(fallback) ? counts.at(fallback) : 0);

  for (std::size_t i = 0; i < rows.size(); ++i) {
    r.rows.push_back({i + 1, rows[i].first, rows[i].second, share_tenths(rows[i].second, r.total)});
  }
  return r;
}

DistributionReport distribution(const std::vector<std::string>& actions,
                                const ActionTaxonomy& taxonomy) {
  if (actions.empty()) throw Error(ErrorCode::kEmptyInput, "no actions to summarize");
  std::map<std::string, std::uint64_t> counts;
  for (const auto& a : actions) ++counts[taxonomy.classify(a)];
  return distribution_from_counts(counts, taxonomy.categories(), taxonomy.fallback());
}

nlohmann::json DistributionReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& row : rows) {
    rows_j.push_back({{"rank", row.rank},
                      {"category", row.category},
                      {"count", row.count},
                      {"share", row.share()}});
  }
  return {{"rows", rows_j}, {"total", total}, {"total_share", 100.0}};
}

std::string DistributionReport::to_csv() const {
  std::ostringstream out;
  out << "Rank,Category,Count,Share\n";
  for (const auto& row : rows) {
    out << row.rank << ",\"" << row.category << "\"," << row.count << ","
        << format_tenths(row.share_tenths) << "\n";
  }
  out << ",Total," << total << ",100.0\n";
  return out.str();
}

void TrajectoryStats::add(const Trajectory& t) {
  ++trajectories;
  ++step_histogram[t.steps.size()];
  for (const auto& s : t.steps) {
    if (s.action) ++edits;
    if (s.edit_failed) ++failed_edits;
    images.insert(s.image_hash);
  }
  ++termination[std::string(to_string(t.termination))];
}

void TrajectoryStats::merge(const TrajectoryStats& other) {
  trajectories += other.trajectories;
  for (const auto& [k, v] : other.step_histogram) step_histogram[k] += v;
  edits += other.edits;
  failed_edits += other.failed_edits;
  for (const auto& [k, v] : other.termination) termination[k] += v;
  images.insert(other.images.begin(), other.images.end());
}

double TrajectoryStats::edits_mean() const {
  return trajectories == 0 ? 0.0 : static_cast<double>(edits) / static_cast<double>(trajectories);
}

nlohmann::json TrajectoryStats::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [k, v] : step_histogram) hist[std::to_string(k)] = v;
  return {{"trajectories", trajectories}, {"step_histogram", hist},
          {"edits", edits},               {"failed_edits", failed_edits},
          {"edits_mean", edits_mean()},   {"termination", termination},
          {"distinct_images", images.size()}};
}

TrajectoryStats trajectory_stats(const std::vector<Trajectory>& trajectories) {
  TrajectoryStats s;
  for (const auto& t : trajectories) s.add(t);
  return s;
}

std::vector<std::string> collect_actions(const std::vector<Trajectory>& trajectories) {
  std::vector<std::string> out;
  for (const auto& t : trajectories) {
    for (const auto& s : t.steps) {
      if (s.action) out.push_back(*s.action);
    }
  }
  return out;
}

}  // namespace sketchpipe
