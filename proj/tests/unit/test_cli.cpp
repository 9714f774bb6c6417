#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("tah_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args, const std::string& env = "") {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" TAH_CLI "' " + args + " > '" +
                            out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  // a run small enough for a unit test
  fs::path small_config() {
    const auto p = dir_ / "small.json";
    std::ofstream(p) << R"({"count": 600, "precision": "float64",
      "model": {"hidden_dim": 16, "num_heads": 2, "head_dim": 8, "mlp_dim": 32},
      "reference": {"steps": 40, "eval_every": 20, "checkpoint_every": 20},
      "backbone": {"steps": 40, "eval_every": 20, "checkpoint_every": 20},
      "decider": {"steps": 40, "eval_every": 20, "checkpoint_every": 20},
      "eval": {"noise_seeds": [1], "depth_mass_sequences": 2},
      "generate": {"prompts": 2, "max_new_tokens": 8}})";
    return p;
  }

  fs::path dir_;
};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
  return h;
}

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("gen-data --count 10").code, 2);
  EXPECT_EQ(run("gen-data --task nope --count 10").code, 2);
  EXPECT_EQ(run("eval --policy bogus").code, 2);
  EXPECT_EQ(run("eval --threshold 1.5").code, 2);
  EXPECT_EQ(run("train-backbone --max-depth 1").code, 2);
  EXPECT_EQ(run("analyze --threshold-sweep 0.9:0.5").code, 2);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  const auto r = run("gen-data --task mod-chain --count 0 --out e");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST_F(Cli, MissingArtifactNamesIt) {
  const auto r = run("train-backbone --out e");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing artifact"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("labels"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("tah label"), std::string::npos) << r.err;

  ASSERT_EQ(run("gen-data --task mod-chain --count 50 --out e").code, 0);
  const auto e = run("label --out e");
  EXPECT_EQ(e.code, 1);
  EXPECT_NE(e.err.find("reference"), std::string::npos) << e.err;
}

TEST_F(Cli, GenDataIsByteIdenticalAcrossReruns) {
  ASSERT_EQ(run("gen-data --task mod-chain --count 300 --seed 7 --out a").code, 0);
  ASSERT_EQ(run("gen-data --task mod-chain --count 300 --seed 7 --out b").code, 0);
  const auto a = slurp(dir_ / "a" / "data" / "corpus.txt");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir_ / "b" / "data" / "corpus.txt"));
  ASSERT_EQ(run("gen-data --task mod-chain --count 300 --seed 8 --out c").code, 0);
  EXPECT_NE(a, slurp(dir_ / "c" / "data" / "corpus.txt"));
}

TEST_F(Cli, RunRootFromEnvironment) {
  ASSERT_EQ(run("gen-data --task copy --count 20 --seed 3", "TAH_RUN_ROOT=rr").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "rr" / "seed-3" / "config.json"));
  EXPECT_TRUE(fs::exists(dir_ / "rr" / "seed-3" / "data" / "corpus.txt"));
}

TEST_F(Cli, StagedRunEndToEnd) {
  const auto cfg = small_config().string();
  ASSERT_EQ(run("gen-data --task mod-chain --count 600 --config " + cfg + " --out r").code, 0);
  ASSERT_EQ(run("train-ref --out r").code, 0);
  ASSERT_EQ(run("label --out r").code, 0);
  ASSERT_EQ(run("train-backbone --policy oracle --out r").code, 0);
  ASSERT_EQ(run("train-backbone --policy always_think --out r").code, 0);
  ASSERT_EQ(run("train-decider --out r").code, 0);

  // a finished stage is not retrained
  const auto again = run("train-ref --out r");
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.err.find("up to date"), std::string::npos) << again.err;

  const auto ev = run("eval --policy always_think --out r");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_TRUE(std::regex_search(ev.out, std::regex("always_think\\t[0-9.]+\\t2\\.00\\t"))) << ev.out;
  const auto st = run("eval --policy standard --out r");
  EXPECT_TRUE(std::regex_search(st.out, std::regex("standard\\t[0-9.]+\\t1\\.00\\t"))) << st.out;

  const auto an = run("analyze --threshold-sweep 0.5:0.99 --out r");
  ASSERT_EQ(an.code, 0) << an.err;
  std::istringstream lines(an.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "threshold\tcontinue_fraction\taccuracy");
  int triples = 0;
  double prev = 2.0;
  while (std::getline(lines, line)) {
    double t, c, a;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf\t%lf\t%lf", &t, &c, &a), 3) << line;
    EXPECT_LE(c, prev);
    prev = c;
    ++triples;
  }
  EXPECT_EQ(triples, 50);

  // config echo and command log
  const auto echoed = nlohmann::json::parse(slurp(dir_ / "r" / "config.json"));
  EXPECT_EQ(echoed.at("precision"), "float64");
  EXPECT_EQ(echoed.at("reference").at("steps"), 40);
  EXPECT_TRUE(fs::exists(dir_ / "r" / "commands.jsonl"));

  // content-addressed checkpoints
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir_ / "r")) {
    if (e.path().extension() != ".tah" || e.path().parent_path().filename() != "checkpoints") continue;
    const auto name = e.path().stem().string();
    const auto dash = name.rfind('-');
    ASSERT_NE(dash, std::string::npos);
    EXPECT_EQ(std::stoull(name.substr(dash + 1), nullptr, 16), fnv1a(slurp(e.path()))) << e.path();
    ++files;
  }
  EXPECT_GT(files, 0u);

  const auto gen = run("generate --prompt \"3+4=\" --policy always_think --out r");
  EXPECT_EQ(gen.code, 0) << gen.err;
  EXPECT_NE(gen.out.find("mean_iterations 2.00"), std::string::npos) << gen.out;
}

TEST_F(Cli, EchoedConfigReproducesRunBitExactly) {
  const auto cfg = small_config().string();
  ASSERT_EQ(run("pipeline --task mod-chain --config " + cfg + " --seed 5 --out first").code, 0);
  fs::copy_file(dir_ / "first" / "config.json", dir_ / "echoed.json");
  ASSERT_EQ(run("pipeline --config echoed.json --out second").code, 0);
  EXPECT_EQ(slurp(dir_ / "first" / "eval.json"), slurp(dir_ / "second" / "eval.json"));
  EXPECT_EQ(slurp(dir_ / "first" / "config.json"), slurp(dir_ / "second" / "config.json"));
  for (const char* f : {"threshold_sweep.json", "flops.json", "overthink.json", "sensitivity.json"}) {
    EXPECT_EQ(slurp(dir_ / "first" / "analysis" / f), slurp(dir_ / "second" / "analysis" / f)) << f;
  }
}
