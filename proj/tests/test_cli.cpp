#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "nnscene/ann_index.hpp"
#include "nnscene/binary_io.hpp"
#include "nnscene/memory_bank.hpp"
#include "test_support.hpp"

namespace nnscene {
namespace {

using testing::TempDir;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  TempDir dir;
  std::string path(const std::string& name) const { return (dir / name).string(); }

  void synth(const std::string& name, const std::vector<std::string>& extra = {}, const std::string& images = "6",
             const std::string& side = "6") {
    std::vector<std::string> args{"synth", "--images", images, "--height", side, "--width", side, "--dim", "16",
                                  "--epochs", "1", "-o", path(name)};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = run(args);
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  }
};

TEST_F(Cli, SynthIsDeterministic) {
  synth("a.hbfs");
  synth("b.hbfs");
  EXPECT_EQ(slurp(path("a.hbfs")), slurp(path("b.hbfs")));
  synth("c.hbfs", {"--seed", "5"});
  EXPECT_NE(slurp(path("a.hbfs")), slurp(path("c.hbfs")));
}

TEST_F(Cli, SelfPromptEvaluationIsPerfect) {
  synth("p.hbfs");
  auto r = run({"build-bank", "-f", path("p.hbfs"), "-o", path("p.bank"), "--no-downsample", "--index", "exact",
                "--aug-epochs", "1"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("216 rows"), std::string::npos) << r.out;
  r = run({"eval", "-b", path("p.bank"), "-f", path("p.hbfs"), "--k", "1", "--report", path("report.txt")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("miou=1\n"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(path("report.txt")), r.out);
}

TEST_F(Cli, DecodeThenEvaluatePredictions) {
  synth("p.hbfs");
  synth("q.hbfs", {"--seed", "9", "--first-id", "100"});
  auto r = run({"build-bank", "-f", path("p.hbfs"), "-o", path("p.bank"), "--memory-size", "120", "--aug-epochs",
                "1", "--num-leaves", "4", "--leaves-to-search", "4"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("n_per_image=20"), std::string::npos) << r.out;
  r = run({"decode", "-b", path("p.bank"), "-f", path("q.hbfs"), "-o", path("q.hbpr"), "--k", "5"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  r = run({"eval", "-p", path("q.hbpr"), "-f", path("q.hbfs"), "--format", "csv"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(r.out.rfind("task,miou,", 0), 0u) << r.out;
}

TEST_F(Cli, UnusableBankSizeIsAUsageError) {
  synth("p.hbfs");
  const auto r = run({"build-bank", "-f", path("p.hbfs"), "-o", path("x.bank"), "--memory-size", "3", "--aug-epochs", "1"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("n_per_image = 0"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(path("x.bank")));
}

TEST_F(Cli, ParseErrors) {
  auto r = run({"decode", "--bogus"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos) << r.err;
  r = run({"decode", "-b", "x"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("required"), std::string::npos) << r.err;
  r = run({});
  EXPECT_EQ(r.code, cli::kExitUsage);
  r = run({"synth", "--task", "flow"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  r = run({"eval", "-f", "x"});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(Cli, HelpExitsZero) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("build-bank"), std::string::npos);
  r = run({"build-bank", "--help"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("--memory-size"), std::string::npos);
  EXPECT_NE(r.out.find("10240000"), std::string::npos);
}

TEST_F(Cli, MissingInputIsARuntimeError) {
  const auto r = run({"build-bank", "-f", path("missing.hbfs"), "-o", path("x.bank")});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST_F(Cli, LowDataPresetSetsIndexDefaults) {
  synth("p.hbfs", {}, "32", "8");
  auto r = run({"build-bank", "-f", path("p.hbfs"), "-o", path("l.bank"), "--preset", "low-data", "--aug-epochs",
                "1", "--no-downsample"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("2048 rows"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("leaves 23, probe 12, block 4, reorder 1800"), std::string::npos) << r.out;
  const BankFile f = read_bank_file(path("l.bank"));
  ASSERT_TRUE(f.index.has_value());
  EXPECT_EQ(f.index->params().reorder_n, 1800u);
  r = run({"build-bank", "-f", path("p.hbfs"), "-o", path("d.bank"), "--aug-epochs", "1", "--no-downsample"});
  EXPECT_NE(r.out.find("leaves 23, probe 1, block 4, reorder 120"), std::string::npos) << r.out;
}

TEST_F(Cli, PretrainToyWritesLogAndCheckpoint) {
  std::ofstream(path("toy.cfg")) << "steps = 5\nbatch = 4\n";
  auto r = run({"pretrain-toy", "-c", path("toy.cfg"), "--log", path("loss.csv"), "--checkpoint", path("ck.bin")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_NE(r.out.find("steps=5"), std::string::npos);
  const auto log = slurp(path("loss.csv"));
  EXPECT_EQ(log.rfind("step,total,ssl,sup\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 6);
  EXPECT_TRUE(std::filesystem::exists(path("ck.bin")));
  r = run({"pretrain-toy", "--lambda", "3", "--log", path("x.csv")});
  EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST_F(Cli, BenchWritesCsv) {
  const auto r = run({"bench", "--sizes", "300,600", "--modes", "exact", "--dim", "16", "--grid", "2", "--k", "4",
                      "--clusters", "8", "--min-samples", "1", "--max-samples", "1", "-o", path("b.csv")});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto csv = slurp(path("b.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

}  // namespace
}  // namespace nnscene
