// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "localist/serialization.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace localist::cli {
namespace {

constexpr const char* kSmallConfig = R"(seed = 5
[partition]
blocks = 4
anchors_per_block = 1
fillers_per_block = 2
dim_per_block = 8
[task]
sequence_length = 3
blocks_present = 2
samples = 300
[model]
heads = 4
[train]
preset = "localist"
steps = 40
checkpoint_every = 10
eval_samples = 64
[sweep]
alphas = [0.01, 10.0]
taus = [1.0]
)";

class Cli : public ::testing::Test {
 protected:
  fs::path root;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root = fs::temp_directory_path() / (std::string("localist_cli_") + info->name());
    fs::remove_all(root);
    fs::create_directories(root);
    write("config.toml", kSmallConfig);
    unsetenv("LOCALIST_OUT");
  }
  void TearDown() override {
    unsetenv("LOCALIST_OUT");
    fs::remove_all(root);
  }

  fs::path write(const std::string& name, const std::string& text) {
    const auto p = root / name;
    std::ofstream(p) << text;
    return p;
  }
  std::string path(const std::string& name) const { return (root / name).string(); }

  static int invoke(std::initializer_list<std::string> args) {
    std::vector<std::string> owned{"localist"};
    owned.insert(owned.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : owned) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
  }

  int gen(const std::string& out, const std::string& config = "config.toml") {
    return invoke({"gen", "--config", path(config), "--out", path(out)});
  }
  int train(const std::string& out, std::initializer_list<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--config", path("config.toml"), "--data", path("data"), "--out", path(out)};
    args.insert(args.end(), extra.begin(), extra.end());
    std::vector<const char*> argv{"localist"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
  }

  static nlohmann::json load(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

  static std::size_t injections(const fs::path& metrics) {
    std::ifstream in(metrics);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);)
      if (nlohmann::json::parse(line).at("type") == "injection") ++n;
    return n;
  }
};

TEST_F(Cli, GenWritesArtifacts) {
  ASSERT_EQ(gen("data"), kExitOk);
  for (const char* f : {"partition.json", "dataset.jsonl", "manifest.json"}) EXPECT_TRUE(fs::exists(root / "data" / f)) << f;
  const auto m = load(root / "data" / "manifest.json");
  EXPECT_EQ(m.at("command"), "gen");
  EXPECT_EQ(m.at("seed"), 5);
  EXPECT_EQ(m.at("artifacts").size(), 2u);
  EXPECT_FALSE(m.contains("timestamp"));
}

TEST_F(Cli, GenIsDeterministic) {
  ASSERT_EQ(gen("a"), kExitOk);
  ASSERT_EQ(gen("b"), kExitOk);
  for (const char* f : {"partition.json", "dataset.jsonl"})
    EXPECT_EQ(file_sha256(root / "a" / f), file_sha256(root / "b" / f)) << f;
  ASSERT_EQ(invoke({"gen", "--config", path("config.toml"), "--out", path("c"), "--seed", "6"}), kExitOk);
  EXPECT_NE(file_sha256(root / "a" / "partition.json"), file_sha256(root / "c" / "partition.json"));
}

TEST_F(Cli, MissingTaskTableIsInputError) {
  write("bad.toml", "seed = 1\n[partition]\nblocks = 2\n");
  EXPECT_EQ(gen("data", "bad.toml"), kExitInputError);
}

TEST_F(Cli, UnknownKeyAndBadTypeAreInputErrors) {
  write("typo.toml", std::string(kSmallConfig) + "[verify]\ntarget_rat = 0.9\n");
  EXPECT_EQ(gen("d1", "typo.toml"), kExitInputError);
  write("type.toml", "seed = \"seven\"\n");
  EXPECT_EQ(gen("d2", "type.toml"), kExitInputError);
  EXPECT_EQ(gen("d3", "missing.toml"), kExitInputError);
}

TEST_F(Cli, EnvironmentOverridesOutDir) {
  setenv("LOCALIST_OUT", path("from_env").c_str(), 1);
  ASSERT_EQ(gen("from_flag"), kExitOk);
  EXPECT_TRUE(fs::exists(root / "from_env" / "partition.json"));
  EXPECT_FALSE(fs::exists(root / "from_flag"));
}

TEST_F(Cli, TrainRecordsPresetAndCheckpoints) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(train("run", {"--preset", "distributed"}), kExitOk);
  const auto m = load(root / "run" / "manifest.json");
  EXPECT_EQ(m.at("preset"), "distributed");
  EXPECT_EQ(m.at("dial").at("tau"), 1.0);
  EXPECT_EQ(m.at("status"), "completed");
  EXPECT_TRUE(fs::exists(root / "run" / "model.json"));
  EXPECT_TRUE(fs::exists(root / "run" / "metrics.jsonl"));
  std::size_t checkpoints = 0;
  for (const auto& e : fs::directory_iterator(root / "run" / "checkpoints")) checkpoints += e.is_regular_file();
  EXPECT_EQ(checkpoints, 5u);  // steps 0, 10, 20, 30, 40
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(train("r1"), kExitOk);
  ASSERT_EQ(train("r2"), kExitOk);
  EXPECT_EQ(file_sha256(root / "r1" / "metrics.jsonl"), file_sha256(root / "r2" / "metrics.jsonl"));
  EXPECT_EQ(file_sha256(root / "r1" / "model.json"), file_sha256(root / "r2" / "model.json"));
}

TEST_F(Cli, UnknownPresetIsInputError) {
  ASSERT_EQ(gen("data"), kExitOk);
  EXPECT_EQ(train("run", {"--preset", "extreme"}), kExitInputError);
}

TEST_F(Cli, WatchedRulesInjectOnceWhenUnchanged) {
  ASSERT_EQ(gen("data"), kExitOk);
  write("r.rules", "rule r1 priority 1 criticality high { when class \"cue1\" then attend block \"b1\"; }\n");
  ASSERT_EQ(train("run", {"--preset", "distributed", "--rules", path("r.rules"), "--watch-rules"}), kExitOk);
  EXPECT_EQ(injections(root / "run" / "metrics.jsonl"), 1u);
}

TEST_F(Cli, VerifyAndBoundsOnTrainedModel) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(train("run"), kExitOk);
  write("r.rules", "rule r1 priority 1 criticality high { when class \"cue1\" then attend block \"b1\"; }\n");
  const int v = invoke({"verify", "--config", path("config.toml"), "--model", path("run/model.json"), "--data",
                        path("data"), "--rules", path("r.rules"), "--out", path("verify"), "--target-rate", "0.0"});
  EXPECT_EQ(v, kExitOk);
  EXPECT_TRUE(fs::exists(root / "verify" / "verdicts.jsonl"));
  EXPECT_TRUE(load(root / "verify" / "compliance.json").contains("per_rule"));
  const int b = invoke({"check-bounds", "--config", path("config.toml"), "--model", path("run/model.json"), "--data",
                        path("data"), "--out", path("bounds")});
  EXPECT_TRUE(b == kExitOk || b == kExitCheckFailed);
  EXPECT_TRUE(fs::exists(root / "bounds" / "bounds.csv"));
  EXPECT_TRUE(fs::exists(root / "bounds" / "bounds_summary.json"));
}

TEST_F(Cli, VerifyOracleModelPasses) {
  ASSERT_EQ(gen("data"), kExitOk);
  const auto bundle = partition_from_json(load(root / "data" / "partition.json"));
  write("oracle.json", model_to_json(testing::oracle_model(bundle)).dump());
  write("all.rules", R"(rule r0 priority 1 criticality low { when class "cue0" then attend block "b0"; }
rule r1 priority 1 criticality low { when class "cue1" then attend block "b1"; }
rule r2 priority 1 criticality low { when class "cue2" then attend block "b2"; }
rule r3 priority 1 criticality low { when class "cue3" then attend block "b3"; }
)");
  EXPECT_EQ(invoke({"verify", "--config", path("config.toml"), "--model", path("oracle.json"), "--data", path("data"),
                    "--rules", path("all.rules"), "--out", path("verify")}),
            kExitOk);
  const auto report = load(root / "verify" / "compliance.json");
  for (const auto& [id, r] : report.at("per_rule").items()) EXPECT_EQ(r.at("rate"), 1.0) << id;
}

TEST_F(Cli, VerifyUntrainedModelFails) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(train("run", {"--preset", "distributed"}), kExitOk);
  write("r.rules", "rule r1 priority 1 criticality high { when class \"cue1\" then attend block \"b1\"; }\n");
  // The step-0 checkpoint holds the freshly initialised weights.
  EXPECT_EQ(invoke({"verify", "--config", path("config.toml"), "--model", path("run/checkpoints/step-000000.json"),
                    "--data", path("data"), "--rules", path("r.rules"), "--out", path("verify")}),
            kExitCheckFailed);
}

TEST_F(Cli, VerifyWithoutRulesIsInputError) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(train("run"), kExitOk);
  EXPECT_EQ(invoke({"verify", "--config", path("config.toml"), "--model", path("run/model.json"), "--data",
                    path("data"), "--out", path("verify")}),
            kExitInputError);
}

TEST_F(Cli, CompileRulesWritesConstraintsAndStore) {
  ASSERT_EQ(gen("data"), kExitOk);
  write("r.rules", "rule r1 priority 1 criticality high { when class \"cue1\" then attend block \"b1\"; }\n");
  ASSERT_EQ(invoke({"compile-rules", "--config", path("config.toml"), "--rules", path("r.rules"), "--data",
                    path("data"), "--store", path("store.rulesdb"), "--out", path("c")}),
            kExitOk);
  const auto doc = load(root / "c" / "constraints.json");
  const auto& list = doc.is_array() ? doc : doc.at("constraints");
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0].at("target_block"), "b1");
  EXPECT_TRUE(fs::exists(root / "store.rulesdb"));
  write("bad.rules", "rule r1 priority 1 criticality high { when class \"cue1\" then attend block \"b9\"; }\n");
  EXPECT_EQ(invoke({"compile-rules", "--config", path("config.toml"), "--rules", path("bad.rules"), "--data",
                    path("data"), "--out", path("c2")}),
            kExitInputError);
}

TEST_F(Cli, SweepWritesOneRowPerGridPoint) {
  ASSERT_EQ(gen("data"), kExitOk);
  ASSERT_EQ(invoke({"sweep", "--config", path("config.toml"), "--data", path("data"), "--out", path("sweep")}), kExitOk);
  std::ifstream in(root / "sweep" / "sweep.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].rfind("alpha,tau,status", 0), 0u);
}

TEST_F(Cli, StreamSeedsAreDistinct) {
  EXPECT_NE(stream_seed(7, Stream::kPartition), stream_seed(7, Stream::kTask));
  EXPECT_EQ(stream_seed(7, Stream::kTrain), stream_seed(7, Stream::kTrain));
}

}  // namespace
}  // namespace localist::cli
