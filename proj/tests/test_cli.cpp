#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using detkit::cli::run;

namespace {

const std::string kToy = std::string(DETKIT_SOURCE_DIR) + "/projects/dab_detr/configs/dab_detr_toy.cfg";

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "detkit");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("detkit_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

size_t count_lines(const std::string& s, const std::string& prefix = "") {
  size_t n = 0;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line.rfind(prefix, 0) == 0) ++n;
  return n;
}

// Short runs keep the suite fast; the schedule must stay valid.
const std::vector<std::string> kShort = {"train.max_iter=3", "train.lr_milestones=[]", "train.warmup_iters=0",
                                         "train.log_period=1"};

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"train", "--config", "/no/such/file.cfg"}).code, 2);
  auto bad_key = cli({"train", "--config", kToy, "--output", scratch("badkey").string(), "train.no_such=1"});
  EXPECT_EQ(bad_key.code, 2) << bad_key.err;
  auto bad_value = cli({"train", "--config", kToy, "--output", scratch("badval").string(), "train.max_iter=[1,"});
  EXPECT_EQ(bad_value.code, 2) << bad_value.err;
  EXPECT_EQ(cli({"analyze", "--config", kToy, "--tool", "fps", "--timed", "5"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, TrainLogsExactlyTheRequestedSteps) {
  auto dir = scratch("train");
  std::vector<std::string> args = {"train", "--config", kToy, "--output", dir.string()};
  args.insert(args.end(), kShort.begin(), kShort.end());
  auto r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(r.out, "iter "), 3u);
  EXPECT_EQ(count_lines(slurp(dir / "log.jsonl")), 3u);
  EXPECT_TRUE(fs::exists(dir / "model_final.ckpt"));
  EXPECT_NE(slurp(dir / "config.cfg").find("\"max_iter\": 3,"), std::string::npos);

  // Resuming the finished run logs nothing new.
  auto again = cli({"train", "--config", (dir / "config.cfg").string(), "--output", dir.string(), "--resume",
                    (dir / "model_final.ckpt").string()});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(count_lines(again.out, "iter "), 0u);
}

TEST(Cli, EvalIsDeterministic) {
  auto dir = scratch("eval");
  std::vector<std::string> args = {"train", "--config", kToy, "--output", (dir / "run").string()};
  args.insert(args.end(), kShort.begin(), kShort.end());
  ASSERT_EQ(cli(args).code, 0);
  const std::string ckpt = (dir / "run" / "model_final.ckpt").string();
  auto a = cli({"eval", "--config", kToy, "--checkpoint", ckpt, "--output", (dir / "a").string()});
  auto b = cli({"eval", "--config", kToy, "--checkpoint", ckpt, "--output", (dir / "b").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("AP50"), std::string::npos);
  EXPECT_NE(a.out.find("nms: off"), std::string::npos);
  EXPECT_EQ(slurp(dir / "a" / "results.json"), slurp(dir / "b" / "results.json"));
  auto n = cli({"eval", "--config", kToy, "--checkpoint", ckpt, "--output", (dir / "n").string(), "--nms-threshold",
                "0.8"});
  EXPECT_NE(n.out.find("nms: 0.80"), std::string::npos);
}

TEST(Cli, BenchmarkIsolatesFailingRows) {
  auto dir = scratch("bench");
  std::ofstream(dir / "broken.cfg") << "model = L(\"detkit.NoSuchThing\")()\n";
  auto r = cli({"benchmark", "--configs", kToy, (dir / "broken.cfg").string(), "--warmup", "0", "--timed", "10",
                "--flops-images", "2", "--out", (dir / "report.md").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(r.out, "|"), 4u);
  EXPECT_NE(r.out.find("broken [error:"), std::string::npos);
  EXPECT_NE(r.out.find(" ± "), std::string::npos);
  EXPECT_NE(r.err.find("broken.cfg"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
}

TEST(Cli, AnalyzeTools) {
  auto p = cli({"analyze", "--config", kToy, "--tool", "params"});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("params: total"), std::string::npos);
  auto f = cli({"analyze", "--config", kToy, "--tool", "flops"});
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_NE(f.out.find("GFLOPs:"), std::string::npos);
  EXPECT_NE(f.out.find("linear"), std::string::npos);
}

TEST(Cli, AblationRowCounts) {
  const std::pair<const char*, size_t> studies[] = {{"nms", 2}, {"freeze", 3}, {"hparams", 4}};
  for (const auto& [study, rows] : studies) {
    auto r = cli({"ablate", "--study", study, "--config", kToy, "--iters", "2", "train.warmup_iters=0"});
    ASSERT_EQ(r.code, 0) << study << ": " << r.err;
    EXPECT_EQ(count_lines(r.out, "|"), rows + 2) << study << "\n" << r.out;
  }
}
