#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "test_support.hpp"

using namespace ytune;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into the captured output.
CliRun cli(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(YTUNE_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

const std::string kSmallEncoder =
    R"("encoder":{"layers":2,"hidden":16,"heads":2,"ffn_dim":32,"vocab_size":300,"max_len":40,"seed":7})";

}  // namespace

TEST(CliFlops, PromptExample) {
  CliRun r = cli("flops --L 4 --M 16 --paradigm prompt --P 8");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.rfind("2304 attention units", 0), 0u) << r.out;
}

TEST(CliFlops, YTuningMeasuredMatchesModel) {
  CliRun r = cli("flops --L 4 --M 16 --N 3 --measure --table --H 16");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("1104 attention units (encoder 1024, fuser 80)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("measured 1104 (encoder 1024, fuser 80)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("feature_based"), std::string::npos);
}

TEST(CliErrors, UnknownFlagOrSubcommandExitsTwo) {
  EXPECT_EQ(cli("flops --bogus 1").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("flops --paradigm nonsense").code, 2);
  EXPECT_EQ(cli("flops --paradigm prompt --P 0").code, 2);
}

TEST(CliErrors, BadConfigExitsTwo) {
  auto dir = ytune::testing::scratch_dir("cli_badcfg");
  std::ofstream(dir / "c.json") << R"({"task":"classification","unknown_key":1})";
  CliRun r = cli("train --config " + q(dir / "c.json"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("unknown_key"), std::string::npos) << r.out;
  std::ofstream(dir / "d.json") << "{not json";
  EXPECT_EQ(cli("train --config " + q(dir / "d.json")).code, 2);
  EXPECT_EQ(cli("train --train-file " + q(dir / "missing.tsv")).code, 2);
  EXPECT_EQ(cli("train --config " + q(dir / "absent.json")).code, 2);
}

TEST(CliErrors, TaskFailureExitsOne) {
  auto dir = ytune::testing::scratch_dir("cli_fail");
  std::ofstream(dir / "bad.tsv") << "no tab on this line\n";
  CliRun r = cli("train --train-file " + q(dir / "bad.tsv") + " --output-dir " + q(dir / "o"));
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("line 1"), std::string::npos) << r.out;
  std::ofstream(dir / "junk.ytck") << "garbage";
  std::ofstream(dir / "d.tsv") << "a\tb\n";
  EXPECT_EQ(cli("eval --checkpoint " + q(dir / "junk.ytck") + " --data " + q(dir / "d.tsv")).code, 1);
}

TEST(CliGen, SameSeedIdenticalFiles) {
  auto dir = ytune::testing::scratch_dir("cli_gen");
  for (const char* g : {"keyword_classification", "trigger_bio", "sentinel_span_qa"}) {
    const std::string common = std::string("gen --generator ") + g + " --train 40 --dev 10 --seed 5 --out ";
    ASSERT_EQ(cli(common + q(dir / "a")).code, 0);
    ASSERT_EQ(cli(common + q(dir / "b")).code, 0);
    for (const auto& e : fs::directory_iterator(dir / "a"))
      EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
    fs::remove_all(dir / "a");
    fs::remove_all(dir / "b");
  }
  ASSERT_EQ(cli("gen --train 30 --dev 5 --seed 5 --out " + q(dir / "c")).code, 0);
  ASSERT_EQ(cli("gen --train 30 --dev 5 --seed 6 --out " + q(dir / "d")).code, 0);
  EXPECT_NE(slurp(dir / "c" / "train.tsv"), slurp(dir / "d" / "train.tsv"));
  EXPECT_EQ(read_classification_raw(dir / "c" / "train.tsv").rows.size(), 30u);
}

TEST(CliTrainEval, EvalOnTrainingFileMatchesFinalTrainingAccuracy) {
  auto dir = ytune::testing::scratch_dir("cli_train");
  ASSERT_EQ(cli("gen --train 60 --dev 20 --seed 2 --out " + q(dir)).code, 0);
  std::ofstream(dir / "run.json") << "{" << kSmallEncoder << R"(,"train":{"epochs":3}})";
  CliRun t = cli("train --config " + q(dir / "run.json") + " --train-file " + q(dir / "train.tsv") +
              " --dev-file " + q(dir / "dev.tsv") + " --output-dir " + q(dir / "out") + " --epochs 4");
  ASSERT_EQ(t.code, 0) << t.out;
  const Json metrics = Json::parse(slurp(dir / "out" / kMetricsFile));
  EXPECT_EQ(metrics["history"].size(), 4u);  // the flag overrode the file
  const Json echo = Json::parse(slurp(dir / "out" / kConfigEcho));
  EXPECT_EQ(echo["train"]["epochs"], 4);
  EXPECT_EQ(echo["encoder"]["hidden"], 16);
  EXPECT_TRUE(metrics["encoder_hash_unchanged"].get<bool>());

  CliRun e = cli("eval --checkpoint " + q(dir / "out" / kCheckpointFile) + " --data " + q(dir / "train.tsv"));
  ASSERT_EQ(e.code, 0) << e.out;
  const Json scored = Json::parse(e.out.substr(0, e.out.find('\n')));
  EXPECT_EQ(scored["accuracy"].get<double>(), metrics["train"]["accuracy"].get<double>());

  // Re-running from the echoed config reproduces the metrics exactly.
  CliRun again = cli("train --config " + q(dir / "out" / kConfigEcho) + " --output-dir " + q(dir / "out2"));
  ASSERT_EQ(again.code, 0) << again.out;
  const Json metrics2 = Json::parse(slurp(dir / "out2" / kMetricsFile));
  EXPECT_EQ(metrics2["history"], metrics["history"]);
  EXPECT_EQ(metrics2["train"], metrics["train"]);
  EXPECT_EQ(metrics2["dev"], metrics["dev"]);
}

TEST(CliTrainEval, TaggingAndQaRun) {
  auto dir = ytune::testing::scratch_dir("cli_tasks");
  struct Case {
    const char* gen;
    const char* task;
    const char* ext;
  };
  for (Case c : {Case{"trigger_bio", "sequence_labeling", ".bio"}, Case{"sentinel_span_qa", "span_qa", ".jsonl"}}) {
    const fs::path d = dir / c.task;
    ASSERT_EQ(cli(std::string("gen --generator ") + c.gen + " --train 20 --dev 5 --classes 2 --out " + q(d)).code,
              0);
    std::ofstream(d / "run.json") << "{" << kSmallEncoder << R"(,"task":")" << c.task << R"("})";
    CliRun t = cli("train --config " + q(d / "run.json") + " --train-file " + q(d / (std::string("train") + c.ext)) +
                " --epochs 2 --output-dir " + q(d / "out"));
    EXPECT_EQ(t.code, 0) << t.out;
    CliRun e = cli("eval --checkpoint " + q(d / "out" / kCheckpointFile) + " --data " +
                q(d / (std::string("dev") + c.ext)));
    EXPECT_EQ(e.code, 0) << e.out;
    EXPECT_NE(e.out.find("f1"), std::string::npos) << e.out;
  }
}

TEST(CliCache, PopulatesStoreOnce) {
  auto dir = ytune::testing::scratch_dir("cli_cache");
  ASSERT_EQ(cli("gen --train 25 --dev 5 --out " + q(dir)).code, 0);
  std::ofstream(dir / "run.json") << "{" << kSmallEncoder << "}";
  const std::string base = "cache --config " + q(dir / "run.json") + " --train-file " + q(dir / "train.tsv") +
                           " --store " + q(dir / "f.ytfs");
  CliRun first = cli(base);
  ASSERT_EQ(first.code, 0) << first.out;
  EXPECT_NE(first.out.find("cached 25 new records"), std::string::npos) << first.out;
  CliRun second = cli(base);
  EXPECT_NE(second.out.find("cached 0 new records"), std::string::npos) << second.out;
  EXPECT_EQ(FeatureStore::open(dir / "f.ytfs", StoreMode::Read).count(), 25u);
  CliRun dev = cli(base + " --data " + q(dir / "dev.tsv"));
  EXPECT_NE(dev.out.find("cached 5 new records"), std::string::npos) << dev.out;
  EXPECT_EQ(cli("cache --config " + q(dir / "run.json") + " --train-file " + q(dir / "train.tsv")).code, 2);
}

TEST(CliThreads, EnvironmentVariableIsValidated) {
  auto dir = ytune::testing::scratch_dir("cli_threads");
  ASSERT_EQ(cli("gen --train 20 --dev 5 --out " + q(dir)).code, 0);
  std::ofstream(dir / "run.json") << "{" << kSmallEncoder << R"(,"train":{"epochs":2}})";
  const std::string args = "train --config " + q(dir / "run.json") + " --train-file " + q(dir / "train.tsv");
  CliRun one = cli(args + " --output-dir " + q(dir / "o1"), "YTUNE_THREADS=1");
  CliRun four = cli(args + " --output-dir " + q(dir / "o4"), "YTUNE_THREADS=4");
  ASSERT_EQ(one.code, 0) << one.out;
  ASSERT_EQ(four.code, 0) << four.out;
  EXPECT_EQ(Json::parse(slurp(dir / "o1" / kMetricsFile))["history"],
            Json::parse(slurp(dir / "o4" / kMetricsFile))["history"]);
  EXPECT_EQ(cli(args + " --output-dir " + q(dir / "o0"), "YTUNE_THREADS=0").code, 2);
  EXPECT_EQ(cli(args + " --output-dir " + q(dir / "ox"), "YTUNE_THREADS=abc").code, 2);
}

TEST(CliBench, SmallRunWritesJson) {
  auto dir = ytune::testing::scratch_dir("cli_bench");
  CliRun r = cli("bench --M 16 --examples 16 --epochs 3 --L 2 --H 16 --json " + q(dir / "b.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const Json j = Json::parse(slurp(dir / "b.json"));
  EXPECT_EQ(j["model_macs"], j["measured_macs"]);
  EXPECT_TRUE(j["losses_identical"].get<bool>());
  EXPECT_EQ(cli("bench --epochs 2").code, 2);
}

TEST(CliAblate, TinySweepWritesMarkdown) {
  auto dir = ytune::testing::scratch_dir("cli_ablate");
  CliRun r = cli("ablate --k 1,2 --depths 1 --epochs 1 --train-size 20 --dev-size 10 --out " + q(dir / "a.md"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string md = slurp(dir / "a.md");
  EXPECT_NE(md.find("| k |"), std::string::npos) << md;
  EXPECT_NE(md.find("opposite_label"), std::string::npos) << md;
  EXPECT_NE(md.find("| init | dev acc |"), std::string::npos) << md;
  EXPECT_EQ(cli("ablate --k 1,x").code, 2);
}
