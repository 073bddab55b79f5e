// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "lka/cli.hpp"

using namespace lka;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "lka_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  auto b = io::read_file(p);
  return {b.begin(), b.end()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kTinyConfig =
    "# tiny model for fast runs\n"
    "model.image_size = 32\n"
    "model.patch_size = 8\n"
    "model.embed_dim = 16\n"
    "model.depth = 1\n"
    "model.heads = 2\n"
    "model.bottleneck = 4\n"
    "model.kernel = 5\n"
    "train.epochs = 2\n"
    "train.batch_size = 8\n"
    "data.samples = 30\n";

fs::path tiny_config(const fs::path& dir) {
  auto p = dir / "tiny.cfg";
  io::write_text(p, kTinyConfig);
  return p;
}

}  // namespace

TEST(Cli, ParamsReportsClosedFormMatch) {
  auto dir = fresh_dir("params");
  auto r = run_cli({"params", "--set", "model.embed_dim=96", "--set", "model.bottleneck=8", "--set", "model.kernel=7",
                    "--set", "model.depth=2", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("per-adapter (closed form): 2040"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("match=true"), std::string::npos);
  EXPECT_NE(r.out.find("adapters    8160"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "effective-config.txt"));
}

TEST(Cli, UnknownFlagExitsTwoWithUsage) {
  auto r = run_cli({"params", "--frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST(Cli, MissingOrUnknownSubcommandExitsTwo) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"dance"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  auto r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("LKA_OUT_DIR"), std::string::npos);
}

TEST(Cli, UnknownConfigKeyExitsTwo) {
  auto dir = fresh_dir("badkey");
  io::write_text(dir / "bad.cfg", "model.colour = blue\n");
  auto r = run_cli({"params", "--config", (dir / "bad.cfg").string(), "--out", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.colour"), std::string::npos);
  EXPECT_EQ(run_cli({"params", "--set", "model.kernel", "--out", dir.string()}).code, 2);
}

TEST(Cli, FlagsWinOverConfigFile) {
  auto dir = fresh_dir("precedence");
  auto cfg = tiny_config(dir);
  ASSERT_EQ(run_cli({"params", "--config", cfg.string(), "--set", "model.kernel=3", "--out", dir.string()}).code, 0);
  auto kv = parse_key_values(slurp(dir / "effective-config.txt"));
  EXPECT_EQ(kv.at("model.kernel"), "3");
  EXPECT_EQ(kv.at("model.embed_dim"), "16");
}

TEST(Cli, OutputDirectoryFromEnvironment) {
  auto dir = fresh_dir("envdir");
  ::setenv(cli::kOutDirEnv, dir.string().c_str(), 1);
  auto r = run_cli({"params"});
  ::unsetenv(cli::kOutDirEnv);
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(dir / "effective-config.txt"));
}

TEST(Cli, SweepWritesOneRowPerCell) {
  auto dir = fresh_dir("sweep");
  auto cfg = tiny_config(dir);
  auto r = run_cli({"sweep", "--config", cfg.string(), "--set", "train.epochs=1", "--kernel", "1,3", "--seeds", "2",
                    "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(dir / "sweep.csv");
  EXPECT_EQ(count_lines(csv), 5u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "kernel,width,seed,test_top1,trainable_params,adapter_params");
  EXPECT_EQ(count_lines(slurp(dir / "sweep-runtime.csv")), 5u);
}

TEST(Cli, ParallelSweepMatchesSequential) {
  auto dir = fresh_dir("sweep_jobs");
  auto cfg = tiny_config(dir);
  std::vector<std::string> base{"sweep", "--config", cfg.string(), "--set", "train.epochs=1", "--kernel", "none,3",
                                "--width", "2,4", "--seeds", "1"};
  auto seq = base, par = base;
  seq.insert(seq.end(), {"--out", (dir / "seq").string()});
  par.insert(par.end(), {"--jobs", "3", "--out", (dir / "par").string()});
  ASSERT_EQ(run_cli(seq).code, 0);
  ASSERT_EQ(run_cli(par).code, 0);
  EXPECT_EQ(slurp(dir / "seq" / "sweep.csv"), slurp(dir / "par" / "sweep.csv"));
  EXPECT_EQ(count_lines(slurp(dir / "seq" / "sweep.csv")), 5u);
}

TEST(Cli, TrainIsReproducibleFromItsEffectiveConfig) {
  auto dir = fresh_dir("train");
  auto cfg = tiny_config(dir);
  auto first = run_cli({"train", "--config", cfg.string(), "--synthetic", "--out", (dir / "a").string()});
  ASSERT_EQ(first.code, 0) << first.err;
  for (const char* f : {"checkpoint.lkck", "metrics.csv", "summary.csv", "effective-config.txt"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  EXPECT_EQ(count_lines(slurp(dir / "a" / "metrics.csv")), 3u);
  auto again = run_cli({"train", "--config", (dir / "a" / "effective-config.txt").string(), "--out",
                        (dir / "b").string()});
  ASSERT_EQ(again.code, 0);
  for (const char* f : {"checkpoint.lkck", "metrics.csv", "summary.csv", "effective-config.txt"})
    EXPECT_EQ(io::read_file(dir / "a" / f), io::read_file(dir / "b" / f)) << f;
}

TEST(Cli, GenDataThenTrainAndEval) {
  auto dir = fresh_dir("pipeline");
  auto cfg = tiny_config(dir);
  auto data = (dir / "data" / "set.lkds").string();
  ASSERT_EQ(run_cli({"gen-data", "--seed", "3", "--n", "25", "--size", "32", "--out", data}).code, 0);
  EXPECT_EQ(load_dataset(data).size(), 25u);
  ASSERT_EQ(run_cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "t").string()}).code, 0);
  auto ev = run_cli({"eval", "--ckpt", (dir / "t" / "checkpoint.lkck").string(), "--data", data, "--out",
                     (dir / "e").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(ev.out.rfind("top-1: ", 0), 0u);
  const auto csv = slurp(dir / "e" / "eval.csv");
  EXPECT_EQ(count_lines(csv), 2u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "checkpoint,data,samples,top1");
}

TEST(Cli, TrainRejectsDataAndSyntheticTogether) {
  auto dir = fresh_dir("excl");
  io::write_text(dir / "x.lkds", "LKDS");
  EXPECT_EQ(run_cli({"train", "--data", (dir / "x.lkds").string(), "--synthetic"}).code, 2);
}

TEST(Cli, ErfWritesMapAndMetrics) {
  auto dir = fresh_dir("erf");
  auto cfg = tiny_config(dir);
  std::vector<std::string> args{"erf", "--config", cfg.string(), "--size", "32", "--images", "3", "--perturb", "0.5"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out", (dir / "a").string()});
  b.insert(b.end(), {"--out", (dir / "b").string()});
  ASSERT_EQ(run_cli(a).code, 0);
  ASSERT_EQ(run_cli(b).code, 0);
  EXPECT_EQ(read_pgm(dir / "a" / "erf.pgm").width, 32u);
  EXPECT_EQ(count_lines(slurp(dir / "a" / "erf.csv")), 4u);
  EXPECT_EQ(io::read_file(dir / "a" / "erf.pgm"), io::read_file(dir / "b" / "erf.pgm"));
}

TEST(Cli, ErfSizeMismatchIsUsageError) {
  auto dir = fresh_dir("erf_size");
  auto cfg = tiny_config(dir);
  EXPECT_EQ(run_cli({"erf", "--config", cfg.string(), "--size", "64", "--out", dir.string()}).code, 2);
}

TEST(Cli, CorruptCheckpointIsRuntimeFailure) {
  auto dir = fresh_dir("corrupt");
  io::write_text(dir / "bad.lkck", "LKCKgarbage");
  auto data = (dir / "d.lkds").string();
  ASSERT_EQ(run_cli({"gen-data", "--n", "8", "--size", "32", "--out", data}).code, 0);
  auto r = run_cli({"eval", "--ckpt", (dir / "bad.lkck").string(), "--data", data, "--out", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST(Cli, MissingInputFileIsUsageError) {
  EXPECT_EQ(run_cli({"eval", "--ckpt", "/nonexistent/x.lkck", "--data", "/nonexistent/y.lkds"}).code, 2);
}
