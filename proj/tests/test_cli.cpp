#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "degenlag/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "degenlag_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(DEGENLAG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string write_config(const std::string& name, const std::string& text) {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / name;
  std::ofstream(p) << text;
  return p.string();
}

std::string out(const std::string& name) { return (kRoot / name).string(); }

}  // namespace

TEST(Cli, HelpExitsCleanly) { EXPECT_EQ(run("--help"), 0); }

TEST(Cli, ArgumentErrorsExitWithTwo) {
  EXPECT_EQ(run("simulate --out " + out("e1")), 2);
  EXPECT_EQ(run("simulate --experiment pendulum --out " + out("e2")), 2);
  EXPECT_EQ(run("integrate --experiment lv --out " + out("e3")), 2);
  EXPECT_EQ(run("simulate --experiment lv --h -0.1 --out " + out("e4")), 2);
  EXPECT_EQ(run("simulate --experiment lv --scheme euler --out " + out("e5")), 2);
  EXPECT_EQ(run("simulate --experiment lv --config /nonexistent.json --out " + out("e6")), 2);
}

TEST(Cli, ConfigErrorsExitWithTwo) {
  const std::string broken = write_config("broken.json", "{\"data\": {");
  EXPECT_EQ(run("gen-data --experiment lv --config " + broken + " --out " + out("c1")), 2);
  const std::string array = write_config("array.json", "[1, 2]");
  EXPECT_EQ(run("gen-data --experiment lv --config " + array + " --out " + out("c2")), 2);
  const std::string typed = write_config("typed.json", "{\"data\": {\"trajectories\": \"many\"}}");
  EXPECT_EQ(run("gen-data --experiment lv --config " + typed + " --out " + out("c3")), 2);
  const std::string epochs = write_config("epochs.json", "{\"train\": {\"phases\": [{\"epochs\": -1, \"lr\": 0.01}]}}");
  EXPECT_EQ(run("train --experiment lv --config " + epochs + " --out " + out("c4")), 2);
  const std::string multi = "--checkpoint a.json --checkpoint b.json";
  EXPECT_EQ(run("simulate --experiment lv " + multi + " --out " + out("c5")), 2);
}

TEST(Cli, NumericalAbortExitsWithThree) {
  EXPECT_EQ(run("simulate --experiment lv --h 5 --steps 10 --out " + out("n1")), 3);
  const auto tr = degenlag::io::read_trajectory_csv(out("n1") + "/trajectory.csv");
  EXPECT_TRUE(tr.diverged);
}

TEST(Cli, GenDataIsByteIdenticalOnRerun) {
  const std::string cfg = write_config("small.json", "{\"data\": {\"trajectories\": 10}}");
  ASSERT_EQ(run("gen-data --experiment lv --seed 4 --config " + cfg + " --out " + out("g1")), 0);
  ASSERT_EQ(run("gen-data --experiment lv --seed 4 --config " + cfg + " --out " + out("g2")), 0);
  for (const char* f : {"pairs.csv", "triples.csv", "initial.csv", "metadata.json"}) {
    ASSERT_TRUE(fs::exists(fs::path(out("g1")) / f)) << f;
    EXPECT_EQ(slurp(fs::path(out("g1")) / f), slurp(fs::path(out("g2")) / f)) << f;
  }
  ASSERT_EQ(run("gen-data --experiment lv --seed 5 --config " + cfg + " --out " + out("g3")), 0);
  EXPECT_NE(slurp(fs::path(out("g1")) / "pairs.csv"), slurp(fs::path(out("g3")) / "pairs.csv"));
}

TEST(Cli, TrainThenSimulateWithCheckpoint) {
  const std::string cfg = write_config(
      "train.json",
      "{\"data\": {\"trajectories\": 20}, \"train\": {\"variant\": \"vf\", \"epsilon\": 1e-6, "
      "\"phases\": [{\"epochs\": 3, \"lr\": 0.01}]}, \"simulate\": {\"steps\": 20, \"h\": 0.1}}");
  ASSERT_EQ(run("train --experiment lv --seed 2 --config " + cfg + " --out " + out("t1")), 0);
  ASSERT_EQ(run("train --experiment lv --seed 2 --config " + cfg + " --out " + out("t2")), 0);
  for (const char* f : {"model.json", "loss.csv", "loss.csv.json", "train_config.json"}) {
    ASSERT_TRUE(fs::exists(fs::path(out("t1")) / f)) << f;
    EXPECT_EQ(slurp(fs::path(out("t1")) / f), slurp(fs::path(out("t2")) / f)) << f;
  }
  const std::string ckpt = out("t1") + "/model.json";
  const int code = run("simulate --experiment lv --config " + cfg + " --checkpoint " + ckpt + " --out " + out("s1"));
  EXPECT_TRUE(code == 0 || code == 3) << code;
  const auto tr = degenlag::io::read_trajectory_csv(out("s1") + "/trajectory.csv");
  EXPECT_GE(tr.size(), 1u);
  const auto meta = degenlag::io::read_json(out("s1") + "/trajectory.csv.json");
  EXPECT_EQ(meta.at("scheme"), "dvi");
  EXPECT_EQ(meta.at("steps"), 20);
}

TEST(Cli, ConvergenceWritesSummaryAndRuns) {
  const std::string cfg = write_config(
      "conv.json",
      "{\"convergence\": {\"h\": [0.1, 0.05], \"t_final\": 1.0, "
      "\"initial\": [[1.0, 1.5], [2.0, 0.7], [0.8, 1.1]]}}");
  ASSERT_EQ(run("convergence --experiment lv --config " + cfg + " --out " + out("v1")), 0);
  const auto summary = degenlag::io::read_csv(out("v1") + "/convergence.csv");
  EXPECT_EQ(summary.header.front(), "h");
  EXPECT_EQ(summary.rows.size(), 4u);
  const auto runs = degenlag::io::read_csv(out("v1") + "/convergence_runs.csv");
  EXPECT_EQ(runs.rows.size(), 12u);
  EXPECT_TRUE(fs::exists(out("v1") + "/convergence.csv.json"));
}
