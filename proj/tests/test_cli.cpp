#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const fs::path& dir) {
  const auto log = dir / "stdout.txt";
  const std::string cmd = std::string(POSE_CLI) + " " + args + " > " + log.string() + " 2> " + (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

nlohmann::json tiny_config(int64_t test_clips) {
  return {{"data", {{"frames", 3}, {"height", 8}, {"width", 8}, {"train_clips", 16}, {"test_clips", test_clips}}},
          {"net", {{"patch", 4}, {"dim", 8}, {"depth", 1}, {"heads", 1}}},
          {"teacher", {{"steps", 2}, {"batch", 4}, {"validate_clips", 4}}},
          {"phase2", {{"steps", 3}, {"batch", 4}, {"divergence_threshold", 0.0}, {"divergence_patience", 1}}},
          {"eval", {{"n_projections", 8}, {"feature_dim", 8}, {"batch", 8}}},
          {"checkpoint_every", 0}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("pose_cli_" + std::string(
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  fs::path write_config(const nlohmann::json& j) {
    const auto p = dir_ / "config.json";
    std::ofstream(p) << j.dump();
    return p;
  }
  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, ConfigMatchesShippedDefaults) {
  const auto r = run("config", dir_);
  ASSERT_EQ(r.code, 0);
  std::ifstream in(fs::path(POSE_SOURCE_DIR) / "configs" / "default.json");
  EXPECT_EQ(nlohmann::json::parse(r.out), nlohmann::json::parse(in));
}

TEST_F(CliTest, ConfigErrorsExitOne) {
  EXPECT_EQ(run("--config " + (dir_ / "missing.json").string() + " config", dir_).code, 1);
  std::ofstream(dir_ / "bad.json") << "{ not json";
  EXPECT_EQ(run("--config " + (dir_ / "bad.json").string() + " config", dir_).code, 1);
  const auto cfg = write_config({{"seeds", nlohmann::json::array()}});
  EXPECT_EQ(run("--config " + cfg.string() + " config", dir_).code, 1);
  EXPECT_EQ(run("eval --ckpt " + (dir_ / "nothing").string() + " --dataset " + dir_.string(), dir_).code, 1);
}

TEST_F(CliTest, SingleStageCommandsChain) {
  const auto cfg = write_config(tiny_config(4)).string();
  const auto data = dir_ / "data";
  ASSERT_EQ(run("--config " + cfg + " --out " + data.string() + " data", dir_).code, 0);
  const auto teacher = dir_ / "teacher";
  ASSERT_EQ(run("--config " + cfg + " --out " + teacher.string() + " train-teacher --dataset " +
                    (data / "train").string(),
                dir_)
                .code,
            0);
  ASSERT_TRUE(fs::exists(teacher / "generator.pt"));
  const auto report = dir_ / "eval" / "report.json";
  const auto r = run("--config " + cfg + " --out " + report.string() + " eval --ckpt " + (teacher / "generator").string() +
                         " --dataset " + (data / "test").string() + " --steps 2",
                     dir_);
  ASSERT_EQ(r.code, 0);
  std::ifstream in(report);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("nfe").get<int64_t>(), 2);
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "report.png"));
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "report.gif"));
}

TEST_F(CliTest, TrainingAndEvaluationFailuresHaveDistinctCodes) {
  const auto cfg = write_config(tiny_config(1)).string();
  const auto data = dir_ / "data";
  ASSERT_EQ(run("--config " + cfg + " --out " + data.string() + " data", dir_).code, 0);
  const auto teacher = dir_ / "teacher";
  ASSERT_EQ(run("--config " + cfg + " --out " + teacher.string() + " train-teacher --dataset " +
                    (data / "train").string(),
                dir_)
                .code,
            0);
  const auto stem = (teacher / "generator").string();
  // Any nonzero logit trips a zero divergence threshold on the first step.
  EXPECT_EQ(run("--config " + cfg + " --out " + (dir_ / "p2").string() + " phase2 --init " + stem + " --teacher " +
                    stem + " --dataset " + (data / "train").string(),
                dir_)
                .code,
            2);
  // A single test clip is too few to evaluate against.
  EXPECT_EQ(run("--config " + cfg + " --out " + (dir_ / "r.json").string() + " eval --ckpt " + stem + " --dataset " +
                    (data / "test").string() + " --steps 1",
                dir_)
                .code,
            3);
}
