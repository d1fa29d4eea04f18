#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "depthot/io.hpp"
#include "depthot/tensor.hpp"

namespace fs = std::filesystem;
using namespace depthot;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string(DEPTHOT_CLI_PATH) + " " + args + " 2>/dev/null";
  CliResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::current_path() / ("cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::string write_map(const std::string& name, const Tensor& t) const {
    write_dten(path(name), t);
    return path(name);
  }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("nonsense").code, 2);
  EXPECT_EQ(cli("otdl --pred x.dten").code, 2);
  EXPECT_EQ(cli("gradcheck --scope everything").code, 2);
  EXPECT_EQ(cli("otdl --pred " + path("missing.dten") + " --gt " + path("missing.dten")).code, 2);
}

TEST_F(Cli, OtdlExample) {
  const std::string a = write_map("a.dten", Tensor(Shape{4, 4}, 2.0)), b = write_map("b.dten", Tensor(Shape{4, 4}, 5.0));
  const CliResult r = cli("otdl --pred " + a + " --gt " + b + " --lo 0.5 --hi 10.5 --bins 10");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "9\n");
  EXPECT_EQ(cli("otdl --pred " + a + " --gt " + a).out, "0\n");
  EXPECT_EQ(cli("otdl --pred " + a + " --gt " + b + " --lo 0.5 --hi 10.5 --bins 10 --solver lp").out, "9\n");
}

TEST_F(Cli, EvalExample) {
  const Tensor gt = Tensor::vector({1, 2, 4, 8});
  Tensor pred = gt;
  for (double& v : pred.data()) v *= 1.25;
  const CliResult r = cli("eval --pred " + write_map("p.dten", pred) + " --gt " + write_map("g.dten", gt) + " --out " + path("ev"));
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "abs_rel,rms,log10,delta1,delta2,delta3,rmse");
  EXPECT_EQ(slurp(path("ev/metrics.csv")), r.out);
}

TEST_F(Cli, GradcheckScopeWritesCsv) {
  const CliResult r = cli("gradcheck --scope losses --instances 3 --out " + path("gc"));
  EXPECT_EQ(r.code, 0);
  const std::string csv = slurp(path("gc/gradcheck.csv"));
  EXPECT_EQ(csv.rfind("name,analytic,numeric,rel_err\n", 0), 0u);
  EXPECT_GT(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST_F(Cli, GradcheckFailsOnImpossibleTolerance) {
  EXPECT_EQ(cli("gradcheck --scope tensor --instances 2 --tolerance 1e-300 --out " + path("gc")).code, 1);
}

TEST_F(Cli, ToytrainIsDeterministicAndWritesAblation) {
  const std::string common = " --steps 4 --train-scenes 4 --eval-scenes 2 --image-size 16 --seed 7";
  ASSERT_EQ(cli("toytrain" + common + " --out " + path("t1")).code, 0);
  ASSERT_EQ(cli("toytrain" + common + " --out " + path("t2")).code, 0);
  for (const char* f : {"ablation.csv", "curve_mse.csv", "curve_otdl.csv", "curve_both.csv", "metrics_both.csv"}) {
    const std::string a = slurp(path("t1/") + f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp(path("t2/") + f)) << f;
  }
  const std::string ablation = slurp(path("t1/ablation.csv"));
  EXPECT_EQ(std::count(ablation.begin(), ablation.end(), '\n'), 4);
  EXPECT_NE(ablation.find("\nmse,"), std::string::npos);
  EXPECT_NE(ablation.find("\notdl,"), std::string::npos);
  EXPECT_NE(ablation.find("\nboth,"), std::string::npos);
}

TEST_F(Cli, ConfigFileMatchesFlags) {
  {
    std::ofstream cfg(path("cfg.ini"));
    cfg << "steps = 3\ntrain-scenes = 3\neval-scenes = 2\nimage-size = 16\nloss = mse\nseed = 5\n";
  }
  ASSERT_EQ(cli("toytrain --config " + path("cfg.ini") + " --out " + path("a")).code, 0);
  ASSERT_EQ(cli("toytrain --steps 3 --train-scenes 3 --eval-scenes 2 --image-size 16 --loss mse --seed 5 --out " + path("b")).code, 0);
  EXPECT_EQ(slurp(path("a/ablation.csv")), slurp(path("b/ablation.csv")));
  // The echoed config replays the run.
  ASSERT_EQ(cli("toytrain --config " + path("a/config.txt") + " --out " + path("c")).code, 0);
  EXPECT_EQ(slurp(path("a/ablation.csv")), slurp(path("c/ablation.csv")));
  EXPECT_NE(slurp(path("a/config.txt")).find("seed=5"), std::string::npos);

  std::ofstream(path("bad.ini")) << "no-such-option = 1\n";
  EXPECT_EQ(cli("toytrain --config " + path("bad.ini")).code, 2);
}

TEST_F(Cli, SeedChangesOutput) {
  const std::string common = "toytrain --steps 2 --train-scenes 2 --eval-scenes 1 --image-size 16 --loss mse";
  ASSERT_EQ(cli(common + " --seed 1 --out " + path("s1")).code, 0);
  ASSERT_EQ(cli(common + " --seed 2 --out " + path("s2")).code, 0);
  EXPECT_NE(slurp(path("s1/ablation.csv")), slurp(path("s2/ablation.csv")));
}

TEST_F(Cli, MasksweepWritesArtifacts) {
  const std::string args =
      "masksweep --predictor attn_toy --lambdas 0,3 --steps 5 --train-scenes 2 --pretrain-steps 5 --out ";
  ASSERT_EQ(cli(args + path("m1")).code, 0);
  ASSERT_EQ(cli(args + path("m2")).code, 0);
  const std::string csv = slurp(path("m1/masksweep.csv"));
  EXPECT_EQ(csv.rfind("lambda,sparseness,rmse_vs_full,rmse_vs_gt\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  for (const char* f : {"masksweep.csv", "mask_0.dten", "mask_1.dten", "output_1.dten", "image.dten", "full.dten"}) {
    EXPECT_EQ(slurp(path("m1/") + f), slurp(path("m2/") + f)) << f;
  }
  const Tensor mask = read_dten(path("m1/mask_1.dten"));
  for (double v : mask.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_EQ(slurp(path("m1/mask_1.pgm")).rfind("P5\n", 0), 0u);
}
