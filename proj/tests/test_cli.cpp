// Copyright 2026 The spkdis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include "cli_util.hpp"
#include "json.hpp"
#include "spkdis/dataio.hpp"
#include "test_util.hpp"

namespace spkdis {
namespace {

using nlohmann::json;
using testing::run_cli;
using testing::TempDir;

TEST(Cli, SynthWritesArchiveLabelsAndManifest) {
  TempDir dir;
  const auto r = run_cli({"synth", "-o", (dir / "c").string(), "--dim", "16", "--speakers", "3", "--utts", "4",
                          "--seed", "1"},
                         dir.path());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto files = testing::snapshot(dir / "c");
  EXPECT_EQ(files.size(), 3u);
  EXPECT_EQ(load_archive(dir / "c/embeddings.emba").size(), 12u);
  const auto m = json::parse(files.at("manifest.json"));
  EXPECT_EQ(m.at("command"), "synth");
  EXPECT_EQ(m.at("seed"), 1);
  EXPECT_TRUE(m.at("outputs").is_array());
}

TEST(Cli, MissingOutputIsUsageError) {
  TempDir dir;
  const auto r = run_cli({"synth"}, dir.path());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
  EXPECT_EQ(run_cli({}, dir.path()).exit_code, 2);
  EXPECT_EQ(run_cli({"synth", "-o", (dir / "x").string(), "--dim", "abc"}, dir.path()).exit_code, 2);
}

TEST(Cli, BadInputReportsStructuredError) {
  TempDir dir;
  testing::write_file(dir / "bad.emba", "not an archive");
  testing::write_file(dir / "l.tsv", "utt\tspeaker\n");
  testing::write_file(dir / "g.json", "{}");
  const auto r = run_cli({"augment", "-o", (dir / "a").string(), "--embeddings", (dir / "bad.emba").string(),
                          "--labels", (dir / "l.tsv").string(), "--generator", (dir / "g.json").string()},
                         dir.path());
  EXPECT_NE(r.exit_code, 0);
  const auto err = json::parse(r.err);
  EXPECT_TRUE(err.at("error").contains("type"));
  EXPECT_TRUE(err.at("error").contains("message"));
}

TEST(Cli, ChiSquaredFromTable) {
  TempDir dir;
  testing::write_file(dir / "t.csv", "20,5\n5,20\n");
  const auto r = run_cli({"chi2", "--table", (dir / "t.csv").string()}, dir.path());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("statistic").get<double>(), 18.0);
  EXPECT_EQ(j.at("reject"), true);
  EXPECT_NEAR(j.at("p_value").get<double>(), 2.209e-5, 1e-8);
}

TEST(Cli, DetOfSeparatedScores) {
  TempDir dir;
  testing::write_file(dir / "s.txt", "a b target 0.9\na c target 0.8\nb c nontarget 0.2\nc d nontarget 0.1\n");
  const auto r = run_cli({"det", "-o", (dir / "d").string(), "--scores", (dir / "s.txt").string()}, dir.path());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("eer"), 0.0);
  EXPECT_EQ(testing::read_bytes(dir / "d/det.csv").substr(0, 8), "fpr,fnr\n");
  EXPECT_EQ(testing::read_bytes(dir / "d/det.json"), R"({"eer":0.0,"n_target":2,"n_nontarget":2})" "\n");
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  TempDir dir;
  testing::write_file(dir / "cfg.json", R"({"dim": 8, "speakers": 2, "utts": 3, "seed": 4})");
  auto r = run_cli({"synth", "--config", (dir / "cfg.json").string(), "-o", (dir / "a").string()}, dir.path());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(load_archive(dir / "a/embeddings.emba").dim(), 8u);
  r = run_cli({"synth", "--config", (dir / "cfg.json").string(), "-o", (dir / "b").string(), "--dim", "12"},
              dir.path());
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto b = load_archive(dir / "b/embeddings.emba");
  EXPECT_EQ(b.dim(), 12u);
  EXPECT_EQ(b.size(), 6u);
}

TEST(Cli, FullRecipeRunsAndReplaysFromManifests) {
  TempDir dir;
  const auto steps = testing::recipe(dir / "run");
  for (const auto& step : steps) {
    const auto r = run_cli(step.args, dir.path());
    ASSERT_EQ(r.exit_code, 0) << step.name << ": " << r.err;
  }
  for (const std::string f : {"uai/model/uai.json", "uai/train_log.jsonl", "extract/h1.emba", "extract/h2.emba",
                              "probe_h1/probe.tsv", "score_raw/scores.txt", "det_raw/det.csv", "chi2/chi2.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / ("run/" + f))) << f;
  EXPECT_EQ(load_trials(dir / "run/trials/trials.txt").size(), 200u);

  for (const auto& step : steps) {
    const auto original = dir / ("run/" + step.name);
    const auto replay = dir / ("replay/" + step.name);
    const auto r = run_cli({step.args[0], "--config", (original / step.manifest).string(), "-o", replay.string()},
                           dir.path());
    ASSERT_EQ(r.exit_code, 0) << step.name << ": " << r.err;
    const auto a = testing::snapshot(original);
    const auto b = testing::snapshot(replay);
    ASSERT_EQ(a.size(), b.size()) << step.name;
    for (const auto& [name, bytes] : a) EXPECT_TRUE(b.count(name) && b.at(name) == bytes) << step.name << "/" << name;
  }
}

}  // namespace
}  // namespace spkdis
