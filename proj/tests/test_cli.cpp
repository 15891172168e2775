// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "diet_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(DIET_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

fs::path fresh(const std::string& name) {
  const fs::path dir = kRoot / name;
  fs::remove_all(dir);
  return dir;
}

const char* kSmall = " --n 8 --d 8 --heads 2 --layers 1 --d-p 2 --seed 3";

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("frobnicate"), 0);
  EXPECT_NE(run("train --scheme rope"), 0);
}

TEST(Cli, VerifyDefaultsPass) {
  const fs::path out = fresh("verify_default");
  ASSERT_EQ(run("verify --out " + out.string()), 0);
  const json r = read_json(out / "verify_report.json");
  EXPECT_TRUE(r["passed"].get<bool>());
  EXPECT_GE(r["suites_passed"].get<int>(), 4);
  EXPECT_TRUE(fs::exists(out / "run_config.json"));
  EXPECT_EQ(read_json(out / "run_meta.json")["exit_status"], 0);
}

TEST(Cli, VerifyInjectedFaultExitsOne) {
  const fs::path out = fresh("verify_fault");
  EXPECT_EQ(run("verify --trials 10 --equiv-inputs 2 --grad-entries 2 --batches 1 --inject-grad-fault --out " +
                out.string()),
            1);
  const json r = read_json(out / "verify_report.json");
  EXPECT_FALSE(r["passed"].get<bool>());
}

TEST(Cli, TrainIsDeterministic) {
  const fs::path a = fresh("train_a");
  const fs::path b = fresh("train_b");
  const std::string args = std::string(" train --task selective-copy --vocab 4 --steps 15") + kSmall + " --out ";
  ASSERT_EQ(run(args + a.string()), 0);
  ASSERT_EQ(run(args + b.string()), 0);
  EXPECT_EQ(slurp(a / "history.csv"), slurp(b / "history.csv"));
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
  json ca = read_json(a / "run_config.json");
  json cb = read_json(b / "run_config.json");
  ca.erase("out");
  cb.erase("out");
  EXPECT_EQ(ca, cb);
  std::istringstream hist(slurp(a / "history.csv"));
  std::string line;
  std::getline(hist, line);
  EXPECT_EQ(line, "step,loss,metric");
  int rows = 0;
  while (std::getline(hist, line)) ++rows;
  EXPECT_EQ(rows, 15);
}

TEST(Cli, ExpectAccuracyAndDivergence) {
  const fs::path out = fresh("train_expect");
  EXPECT_EQ(run(std::string("train --steps 2 --expect-accuracy 1.01") + kSmall + " --out " + out.string()), 1);
  const fs::path div = fresh("train_div");
  EXPECT_EQ(run(std::string("train --task selective-copy --steps 30 --optimizer sgd --lr 1e9 --loss mse") + kSmall +
                " --out " + div.string()),
            3);
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const fs::path out = fresh("config");
  fs::create_directories(kRoot);
  const fs::path cfg = kRoot / "cfg.json";
  std::ofstream(cfg) << R"({"steps": 3, "n": 8, "d": 8, "heads": 2, "layers": 1, "scheme": "diet-rel"})";
  ASSERT_EQ(run("train --config " + cfg.string() + " --steps 5 --out " + out.string()), 0);
  const json rc = read_json(out / "run_config.json");
  EXPECT_EQ(rc["steps"], 5);
  EXPECT_EQ(rc["scheme"], "diet-rel");
  std::ofstream(cfg) << R"({"stepz": 3})";
  EXPECT_EQ(run("train --config " + cfg.string() + " --out " + fresh("config_bad").string()), 2);
}

TEST(Cli, VizFromCheckpoint) {
  const fs::path train = fresh("viz_train");
  ASSERT_EQ(run(std::string("train --scheme diet-abs --steps 3") + kSmall + " --out " + train.string()), 0);
  const fs::path out = fresh("viz");
  ASSERT_EQ(run("viz --checkpoint " + (train / "checkpoint").string() + " --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "scores_l0_h0.svg"));
  EXPECT_TRUE(fs::exists(out / "bias_l0_h1.svg"));
  EXPECT_TRUE(fs::exists(out / "rank_report.json"));
  EXPECT_TRUE(fs::exists(out / "viz_summary.json"));
  EXPECT_EQ(run("viz --checkpoint " + (kRoot / "nothing").string() + " --out " + fresh("viz_missing").string()), 2);
  EXPECT_NE(run("viz --out " + fresh("viz_noarg").string()), 0);
}

TEST(Cli, VizInputAdditiveCosineHistogram) {
  const fs::path train = fresh("viz_ia_train");
  ASSERT_EQ(run(std::string("train --scheme input-add --steps 3") + kSmall + " --out " + train.string()), 0);
  const fs::path out = fresh("viz_ia");
  ASSERT_EQ(run("viz --checkpoint " + (train / "checkpoint").string() + " --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "cosine_histogram.csv"));
}

TEST(Cli, RankScanFreshModel) {
  const fs::path out = fresh("scan");
  ASSERT_EQ(run(std::string("rank-scan --scheme diet-abs") + kSmall + " --out " + out.string()), 0);
  const json r = read_json(out / "rank_report.json");
  EXPECT_TRUE(r.contains("entries"));
}

TEST(Cli, BenchWritesReports) {
  const fs::path out = fresh("bench");
  ASSERT_EQ(run("bench --reps 10 --warmup 3 --batch-size 2 --n 16 --d 16 --heads 2 --layers 1 --out " + out.string()),
            0);
  EXPECT_TRUE(fs::exists(out / "bench.csv"));
  EXPECT_TRUE(fs::exists(out / "bench.json"));
  EXPECT_NE(run("bench --reps 5 --out " + fresh("bench_bad").string()), 0);
}
