#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(C3_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, SynthThenTrainWritesArtifacts) {
  c3::fixtures::TempDir dir("cli-smoke");
  const auto data = dir.path / "data", out = dir.path / "run";
  auto r = run("synth --users 50 --items 100 --groups 20 --seed 7 -o " + q(data));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"group_members.tsv", "user_item.tsv", "group_item.tsv", "stats.json"})
    EXPECT_TRUE(fs::exists(data / f)) << f;
  EXPECT_EQ(read_json(data / "stats.json").at("num_groups"), 20);

  write(dir.path / "run.json",
        json{{"data", data.string()}, {"out", out.string()}, {"epochs", 2}, {"n_eval_neg", 50}, {"seed", 3}}.dump());
  r = run("train -c " + q(dir.path / "run.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"best.ckpt", "last.ckpt", "log.jsonl", "eval.json", "config.echo.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  std::ifstream log(out / "log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    EXPECT_TRUE(j.contains("group_loss"));
    ++lines;
  }
  EXPECT_EQ(lines, 2u);
  const json echo = read_json(out / "config.echo.json");
  EXPECT_EQ(echo.at("epochs"), 2);
  EXPECT_EQ(echo.at("beta"), c3::LossConfig{}.beta);

  r = run("eval -c " + q(dir.path / "run.json"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("HR@10"), std::string::npos);
  r = run("robustness -c " + q(dir.path / "run.json") + " --drift-trials 2");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(read_json(out / "drift.json").at("trials"), 2);
  r = run("export-embeddings -c " + q(dir.path / "run.json"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(out / "embeddings.csv"));
}

TEST(Cli, UntrainedModelRanksNearUniformExpectation) {
  c3::fixtures::TempDir dir("cli-untrained");
  const auto data = dir.path / "data", out = dir.path / "run";
  ASSERT_EQ(run("synth -o " + q(data)).code, 0);
  // lr 0 keeps the initial weights in best.ckpt
  auto r = run("train --data " + q(data) + " -o " + q(out) + " --epochs 1 --lr 0");
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("eval --data " + q(data) + " -o " + q(out) + " --seed 0");
  ASSERT_EQ(r.code, 0) << r.out;
  const json rep = read_json(out / "eval.json");
  EXPECT_NEAR(rep.at("user").at("HR@10").get<double>(), 10.0 / 101.0, 0.06);
}

TEST(Cli, DoubleAblationFlagsReachTheConfig) {
  c3::fixtures::TempDir dir("cli-ablation");
  const auto data = dir.path / "data", out = dir.path / "run";
  ASSERT_EQ(run("synth --users 40 --items 80 --groups 16 -o " + q(data)).code, 0);
  const auto r = run("train --data " + q(data) + " -o " + q(out) +
                     " --epochs 1 --n-eval-neg 40 --no-contrastive --no-margin");
  ASSERT_EQ(r.code, 0) << r.out;
  const json echo = read_json(out / "config.echo.json");
  EXPECT_EQ(echo.at("no_contrastive"), true);
  EXPECT_EQ(echo.at("no_margin"), true);
  std::ifstream log(out / "log.jsonl");
  std::string line;
  std::getline(log, line);
  const json e = json::parse(line);
  EXPECT_EQ(e.at("group_loss").at("l_cont"), 0.0);
  const json& g = e.at("group_loss");
  EXPECT_NEAR(g.at("l_main").get<double>(), g.at("l_pos").get<double>() + g.at("l_neg").get<double>(), 1e-12);
}

TEST(Cli, FlagsOverrideConfigFile) {
  c3::fixtures::TempDir dir("cli-precedence");
  const auto data = dir.path / "data", out = dir.path / "run";
  ASSERT_EQ(run("synth --users 40 --items 80 --groups 16 -o " + q(data)).code, 0);
  write(dir.path / "c.json", json{{"data", data.string()}, {"out", out.string()}, {"epochs", 3}, {"beta", 0.1},
                                  {"n_eval_neg", 40}}
                                 .dump());
  ASSERT_EQ(run("train -c " + q(dir.path / "c.json") + " --epochs 1").code, 0);
  const json echo = read_json(out / "config.echo.json");
  EXPECT_EQ(echo.at("epochs"), 1);
  EXPECT_EQ(echo.at("beta"), 0.1);
}

TEST(Cli, ExitCodes) {
  c3::fixtures::TempDir dir("cli-exit");
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --epochs many").code, 1);
  write(dir.path / "bad.json", R"({"not_a_key": 1})");
  EXPECT_EQ(run("train -c " + q(dir.path / "bad.json")).code, 1);
  EXPECT_EQ(run("train --data " + q(dir.path / "missing") + " -o " + q(dir.path / "o")).code, 2);
  const auto data = dir.path / "data";
  ASSERT_EQ(run("synth --users 40 --items 80 --groups 16 -o " + q(data)).code, 0);
  write(data / "group_members.tsv", "0\tx\n");
  EXPECT_EQ(run("train --data " + q(data) + " -o " + q(dir.path / "o")).code, 2);
  EXPECT_EQ(run("--help").code, 0);
}
