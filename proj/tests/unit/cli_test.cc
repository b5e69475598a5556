// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "cli.h"
#include "sketchpipe/datastore.h"
#include "sketchpipe/trainset.h"
#include "test_support.h"

using namespace sketchpipe;
using sketchpipe::cli::run_cli;

namespace {

std::filesystem::path copy_fixture(const test::TempDir& dir) {
  const auto root = dir / "smoke";
  std::filesystem::copy(SKETCHPIPE_FIXTURE_DIR "/smoke", root, std::filesystem::copy_options::recursive);
  return root;
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli({}), 2);
  EXPECT_EQ(run_cli({"frobnicate"}), 2);
  EXPECT_EQ(run_cli({"export", "--phase", "phase9"}), 2);
  test::TempDir dir;
  test::write_file(dir / "bad.json", "{ not json");
  EXPECT_EQ(run_cli({"--config", (dir / "bad.json").string(), "stats"}), 2);
  test::write_file(dir / "dangling.json", R"({"roles": {"solver": "nobody"}})");
  test::write_file(dir / "instances.jsonl", "");
  EXPECT_EQ(run_cli({"--config", (dir / "dangling.json").string(), "curate"}), 2);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run_cli({"--help"}), 0); }

TEST(Cli, KernelSelfcheck) {
  EXPECT_EQ(run_cli({"kernel-selfcheck", "--configs", "2"}), 0);
  EXPECT_EQ(run_cli({"kernel-selfcheck", "--configs", "1", "--corrupt-gradient"}), 1);
}

TEST(Cli, SmokePipeline) {
  test::TempDir dir;
  const auto root = copy_fixture(dir);
  const std::string config = (root / "config.json").string();

  ASSERT_EQ(run_cli({"--config", config, "curate"}), 0);
  Store store(root / "store");
  const auto trajectories = store.load_all_vector();
  ASSERT_EQ(trajectories.size(), 3u);
  for (const auto& t : trajectories) EXPECT_EQ(t.termination, Termination::kAnswered) << t.id;
  EXPECT_EQ(store.manifest(), store.rescan());
  EXPECT_EQ(store.manifest().by_discipline.at("physics"), 1u);
  EXPECT_TRUE(std::filesystem::exists(root / "out/events/traj-angle.jsonl"));

  // Resuming skips completed episodes without touching the (exhausted) transcripts.
  ASSERT_EQ(run_cli({"--config", config, "curate"}), 0);
  EXPECT_EQ(Store(root / "store").load_all_vector().size(), 3u);

  ASSERT_EQ(run_cli({"--config", config, "filter", "rejection"}), 0);
  const auto report = read_jsonl(root / "out/filter-report.jsonl");
  ASSERT_EQ(report.size(), 3u);
  EXPECT_EQ(report[0].at("decision"), "discard");
  EXPECT_EQ(report[1].at("decision"), "keep");
  EXPECT_EQ(read_jsonl(root / "out/retained.jsonl").size(), 2u);

  ASSERT_EQ(run_cli({"--config", config, "export"}), 0);
  const auto rows = read_jsonl(root / "out/trainset.jsonl");
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    const auto e = training_example_from_json(r);
    EXPECT_EQ(e.phase, TrainPhase::kPhase2);
    EXPECT_FALSE(e.image_refs.empty());
  }

  ASSERT_EQ(run_cli({"--config", config, "stats"}), 0);
  const auto stats = nlohmann::json::parse(test::read_file(root / "out/stats.json"));
  EXPECT_EQ(stats.at("actions").at("total"), 2);
  EXPECT_EQ(stats.at("trajectories").at("trajectories"), 3);
  EXPECT_EQ(test::read_file(root / "out/stats.csv").substr(0, 25), "Rank,Category,Count,Share");

  EXPECT_EQ(run_cli({"--config", config, "replay", "traj-orbit"}), 0);
  EXPECT_EQ(run_cli({"--config", config, "replay", "traj-missing"}), 1);
}

TEST(Cli, StatsFromActionFile) {
  test::TempDir dir;
  test::write_file(dir / "actions.txt", "label the axis\n\ncircle the peak\n");
  test::write_file(dir / "config.json", R"({"paths": {"out": "out"}})");
  EXPECT_EQ(run_cli({"--config", (dir / "config.json").string(), "stats", "--actions",
                     (dir / "actions.txt").string()}),
            0);
  const auto stats = nlohmann::json::parse(test::read_file(dir / "out/stats.json"));
  EXPECT_EQ(stats.at("actions").at("total"), 2);
}

TEST(Cli, ExportOnEmptyStoreFails) {
  test::TempDir dir;
  test::write_file(dir / "config.json", R"({"paths": {"store": "store", "out": "out"}})");
  EXPECT_EQ(run_cli({"--config", (dir / "config.json").string(), "export"}), 1);
}
