#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "pose/errors.hpp"
#include "pose/report.hpp"
#include "pose/rng.hpp"
#include "pose/runner.hpp"

using namespace pose;
namespace fs = std::filesystem;

namespace {

ExperimentSpec tiny_spec() {
  ExperimentSpec s;
  s.data.frames = 3;
  s.data.height = 8;
  s.data.width = 8;
  s.net.patch = 4;
  s.data.train_clips = 24;
  s.data.test_clips = 12;
  s.net.dim = 8;
  s.net.depth = 1;
  s.net.heads = 1;
  s.teacher.steps = 4;
  s.teacher.batch = 4;
  s.teacher.validate_clips = 8;
  s.phase1.steps = 2;
  s.phase1.batch = 4;
  s.phase1.fake_updates = 1;
  s.phase2.steps = 2;
  s.phase2.batch = 4;
  s.baselines.clear();
  BaselineConfig lcm;
  lcm.steps = 2;
  lcm.batch = 4;
  lcm.ode_points = 4;
  s.baselines.push_back(lcm);
  s.seeds = {0};
  s.eval.n_projections = 8;
  s.eval.feature_dim = 8;
  s.eval.batch = 12;
  s.eval_steps = {1, 2};
  s.reference_steps = 2;
  s.checkpoint_every = 0;
  // from_json keeps the network in step with the data.
  return nlohmann::json(s).get<ExperimentSpec>();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pose_runner_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_status(const RunManifest& m, const std::string& status) {
  int n = 0;
  for (const auto& e : m.entries) n += e.status == status;
  return n;
}

// A report on disk plus its manifest entry, for table and report tests.
ManifestEntry fake_eval(const fs::path& root, const std::string& hash, const std::string& group,
                        const std::string& label, uint64_t seed, int64_t nfe, double sw) {
  ManifestEntry e;
  e.stage = "eval";
  e.group = group;
  e.label = label;
  e.seed = seed;
  e.nfe = nfe;
  e.key = label + std::to_string(seed) + "-" + std::to_string(nfe);
  e.spec_hash = hash;
  e.dir = "stages/eval-" + e.key;
  e.report = e.dir + "/report.json";
  e.status = "done";
  EvalReport r;
  r.sliced_wasserstein = sw;
  r.mmd_rbf = sw / 2;
  r.feature_sw = sw;
  r.feature_mmd = sw / 2;
  r.motion_smoothness = 0.5;
  r.subject_consistency = 0.4;
  r.condition_mse = 0.01;
  r.dynamic_degree = 0.3;
  r.nfe = nfe;
  r.wall_time_s = 0.1;
  fs::create_directories(root / e.dir);
  std::ofstream(root / e.report) << nlohmann::json(r).dump(2);
  return e;
}

RunManifest fake_manifest() {
  RunManifest m;
  m.spec_hash = "abc";
  m.code_version = "test";
  m.reference = CompositeReference{0.1, 1.0, 0.01};
  return m;
}

}  // namespace

TEST(Spec, JsonRoundTripIsLossless) {
  const auto s = tiny_spec();
  const nlohmann::json j = s;
  EXPECT_EQ(nlohmann::json(j.get<ExperimentSpec>()), j);
}

TEST(Spec, HashChangesIffSpecChanges) {
  const auto a = tiny_spec();
  auto b = tiny_spec();
  EXPECT_EQ(spec_hash(a), spec_hash(b));
  b.phase2.lambda = 2.5;
  EXPECT_NE(spec_hash(a), spec_hash(b));
  b = tiny_spec();
  b.seeds = {0, 1};
  EXPECT_NE(spec_hash(a), spec_hash(b));
  b = tiny_spec();
  b.data.teacher_mix = 0.25;
  EXPECT_NE(spec_hash(a), spec_hash(b));
  // Where results are written is not part of the experiment.
  b = tiny_spec();
  b.output_root = "elsewhere";
  EXPECT_EQ(spec_hash(a), spec_hash(b));
}

TEST(Spec, ValidationRejectsBadConfigs) {
  auto s = tiny_spec();
  s.seeds.clear();
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = tiny_spec();
  s.ablation.phase1 = {"none", "magic"};
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = tiny_spec();
  s.ablation.lambdas = {-1.0};
  EXPECT_THROW(validate_spec(s), ConfigError);
  s = tiny_spec();
  s.eval_steps = {0};
  EXPECT_THROW(validate_spec(s), ConfigError);
}

TEST(Spec, LoadSpecReportsConfigErrors) {
  const auto dir = fresh_dir("load");
  EXPECT_THROW(load_spec(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_spec(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "badloss.json") << R"({"phase2": {"loss": "wasserstein"}})";
  EXPECT_THROW(load_spec(dir / "badloss.json"), ConfigError);
  std::ofstream(dir / "partial.json") << R"({"seeds": [5], "data": {"height": 8, "width": 8}})";
  const auto s = load_spec(dir / "partial.json");
  EXPECT_EQ(s.seeds, std::vector<uint64_t>{5});
  EXPECT_EQ(s.net.height, 8);
  EXPECT_EQ(s.phase2.lambda, 10.0);
}

TEST(Spec, ShippedConfigsLoad) {
  for (const char* name : {"default.json", "desk.json"}) {
    const auto path = fs::path(POSE_SOURCE_DIR) / "configs" / name;
    ASSERT_TRUE(fs::exists(path)) << path;
    EXPECT_NO_THROW(load_spec(path)) << name;
  }
  // The defaults file mirrors the built-in defaults.
  EXPECT_EQ(spec_hash(load_spec(fs::path(POSE_SOURCE_DIR) / "configs" / "default.json")), spec_hash(ExperimentSpec{}));
}

TEST(Spec, OutputRootPrecedence) {
  auto s = tiny_spec();
  s.output_root = "from_spec";
  unsetenv("POSE_OUTPUT_ROOT");
  EXPECT_EQ(resolve_output_root(std::nullopt, s), fs::path("from_spec"));
  setenv("POSE_OUTPUT_ROOT", "from_env", 1);
  EXPECT_EQ(resolve_output_root(std::nullopt, s), fs::path("from_env"));
  EXPECT_EQ(resolve_output_root(fs::path("explicit"), s), fs::path("explicit"));
  unsetenv("POSE_OUTPUT_ROOT");
}

TEST(Ablation, GridMatchesPublishedRows) {
  const AblationGrid g;
  EXPECT_EQ(g.lambdas, (std::vector<double>{0.0, 2.5, 10.0, 100.0}));
  EXPECT_EQ(g.phase1, (std::vector<std::string>{"none", "lcm", "pose-I"}));
  EXPECT_EQ(g.backbones, (std::vector<std::string>{"frozen", "ema"}));
}

TEST(Teacher, SeedDeterminism) {
  const auto s = tiny_spec();
  const auto train = make_moving_blob(s.data, 16, 3);
  RunOptions o;
  o.seed = 9;
  const auto a = train_teacher(s.teacher, s.net, train, ClipBatch{}, o, s.eval);
  const auto b = train_teacher(s.teacher, s.net, train, ClipBatch{}, o, s.eval);
  const auto pa = a.net->parameters();
  const auto pb = b.net->parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
}

TEST(Teacher, UntrainedTeacherIsFarFromData) {
  auto s = tiny_spec();
  s.data.train_clips = 128;
  s.teacher.steps = 0;
  s.teacher.validate_clips = 64;
  const auto train = make_moving_blob(s.data, 64, 1);
  const auto val = make_moving_blob(s.data, 64, 2);
  RunOptions o;
  const auto r = train_teacher(s.teacher, s.net, train, val, o, s.eval);
  const double floor = sliced_wasserstein(train.video, val.video, s.eval.n_projections, s.eval.projection_seed);
  EXPECT_GT(r.sw_one_step, 3.0 * floor);
  EXPECT_GT(r.sw_many_steps, 3.0 * floor);
}

TEST(Teacher, MixReplacesExactFraction) {
  const auto s = tiny_spec();
  const auto real = make_moving_blob(s.data, 20, 4);
  VelocityNet teacher(s.net);
  const auto same = mix_teacher_samples(real, teacher, 0.0, 2, 1);
  EXPECT_TRUE(torch::equal(same.video, real.video));
  const auto mixed = mix_teacher_samples(real, teacher, 0.5, 2, 1);
  const auto changed = (mixed.video - real.video).abs().flatten(1).amax(1).gt(0).sum().item<int64_t>();
  EXPECT_EQ(changed, 10);
  // Conditioning frames survive the replacement.
  EXPECT_TRUE(torch::equal(mixed.video.select(1, 0), real.video.select(1, 0)));
  EXPECT_TRUE(torch::equal(mixed.condition_frame, mixed.video.select(1, 0)));
  EXPECT_THROW(mix_teacher_samples(real, teacher, 1.5, 2, 1), std::invalid_argument);
}

TEST(Table, MediansOverSeedsAndLatestEntryWins) {
  const auto root = fresh_dir("table");
  auto m = fake_manifest();
  m.entries.push_back(fake_eval(root, "abc", "g", "A", 0, 1, 0.3));
  m.entries.push_back(fake_eval(root, "abc", "g", "A", 1, 1, 0.1));
  m.entries.push_back(fake_eval(root, "abc", "g", "A", 2, 1, 0.2));
  m.entries.push_back(fake_eval(root, "abc", "g", "A", 0, 1, 0.5));  // rerun of seed 0
  m.entries.push_back(fake_eval(root, "stale", "g", "B", 0, 1, 0.9));
  const auto table = build_table(m, root);
  ASSERT_EQ(table.rows.size(), 1u);
  const auto* row = table.find("g", "A", 1);
  ASSERT_NE(row, nullptr);
  EXPECT_EQ(row->seeds.size(), 3u);
  EXPECT_DOUBLE_EQ(*row->median.sliced_wasserstein, 0.2);
  ASSERT_TRUE(row->median.composite.has_value());
  EXPECT_EQ(table.find("g", "B", 1), nullptr);
}

TEST(Report, EmptyManifestSaysNoRuns) {
  const auto root = fresh_dir("empty");
  const auto r = emit_report(root, root / "report");
  EXPECT_TRUE(r.empty);
  EXPECT_NE(slurp(root / "report" / "summary.md").find("no runs"), std::string::npos);
  EXPECT_NE(slurp(root / "report" / "comparison.json").find("no runs"), std::string::npos);
}

TEST(Report, TwoMethodsOneSeedGiveTwoCsvRows) {
  const auto root = fresh_dir("two");
  auto m = fake_manifest();
  m.entries.push_back(fake_eval(root, "abc", "pipeline", "pose", 0, 1, 0.1));
  m.entries.push_back(fake_eval(root, "abc", "pipeline", "lcm", 0, 1, 0.2));
  const auto r = emit_report(m, root, root / "report");
  EXPECT_EQ(r.table_rows, 2u);
  std::istringstream csv(slurp(root / "report" / "comparison.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) lines += !line.empty();
  EXPECT_EQ(lines, 3);  // header + two rows
  // Ranked by composite: lower SW wins.
  const auto summary = slurp(root / "report" / "summary.md");
  EXPECT_LT(summary.find("| pose |"), summary.find("| lcm |"));
}

TEST(Report, MissingReportIsAWarning) {
  const auto root = fresh_dir("partial");
  auto m = fake_manifest();
  m.entries.push_back(fake_eval(root, "abc", "pipeline", "pose", 0, 1, 0.1));
  auto lost = fake_eval(root, "abc", "pipeline", "add", 0, 1, 0.2);
  fs::remove(root / lost.report);
  m.entries.push_back(lost);
  const auto r = emit_report(m, root, root / "report");
  EXPECT_EQ(r.table_rows, 1u);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_NE(slurp(root / "report" / "summary.md").find("Warnings"), std::string::npos);
}

TEST(Report, LossCurveSvgHasOnePanelPerKey) {
  std::vector<nlohmann::json> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({{"step", i}, {"a", i * 0.5}, {"b", 1.0 / (i + 1)}});
  const auto svg = loss_curve_svg(rows, "t");
  size_t n = 0;
  for (size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++n;
  EXPECT_EQ(n, 2u);
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_dir("pipeline"));
    manifest_ = new RunManifest(run_pipeline(tiny_spec(), *root_, {}));
  }
  static void TearDownTestSuite() {
    delete root_;
    delete manifest_;
  }
  static fs::path* root_;
  static RunManifest* manifest_;
};
fs::path* PipelineTest::root_ = nullptr;
RunManifest* PipelineTest::manifest_ = nullptr;

TEST_F(PipelineTest, ManifestRecordsEveryStage) {
  std::set<std::string> stages;
  for (const auto& e : manifest_->entries) {
    stages.insert(e.stage);
    // Shared stages (teacher at the reference step count) are cached within a run.
    EXPECT_TRUE(e.status == "done" || e.status == "cached") << e.stage << " " << e.label;
    EXPECT_TRUE(fs::exists(*root_ / e.dir / "stage.json"));
    if (!e.checkpoint.empty()) EXPECT_TRUE(checkpoint_exists(*root_ / e.checkpoint)) << e.checkpoint;
    if (!e.metrics.empty()) EXPECT_TRUE(fs::exists(*root_ / e.metrics)) << e.metrics;
    if (!e.report.empty()) EXPECT_TRUE(fs::exists(*root_ / e.report)) << e.report;
    EXPECT_FALSE(e.started.empty());
    EXPECT_EQ(e.spec_hash, spec_hash(tiny_spec()));
  }
  EXPECT_EQ(stages, (std::set<std::string>{"data", "teacher", "distill_data", "phase1", "phase2", "baseline", "eval"}));
  EXPECT_TRUE(manifest_->reference.has_value());
  EXPECT_EQ(load_manifest(*root_ / "manifest.json").entries.size(), manifest_->entries.size());
}

TEST_F(PipelineTest, EmitsRankedComparisonAtEveryNfe) {
  const auto table = build_table(*manifest_, *root_);
  for (const char* label : {"teacher", "pose", "lcm"}) {
    for (int64_t nfe : {1, 2}) {
      const auto* row = table.find("pipeline", label, nfe);
      ASSERT_NE(row, nullptr) << label << " " << nfe;
      EXPECT_TRUE(row->median.composite.has_value());
    }
  }
  const auto r = emit_report(*root_, *root_ / "report");
  EXPECT_FALSE(r.empty);
  EXPECT_TRUE(fs::exists(*root_ / "report" / "samples" / "pipeline-pose-nfe1.png"));
  EXPECT_TRUE(fs::exists(*root_ / "report" / "samples" / "pipeline-pose-nfe1.gif"));
  EXPECT_TRUE(fs::exists(*root_ / "report" / "curves" / "phase2-pose-seed0.svg"));
}

TEST_F(PipelineTest, RerunIsANoOp) {
  std::vector<std::string> executed;
  PipelineOptions o;
  o.before_stage = [&](const std::string& stage, const std::string&) { executed.push_back(stage); };
  const auto before = fs::last_write_time(checkpoint_weights(*root_ / manifest_->entries[1].checkpoint));
  const auto m = run_pipeline(tiny_spec(), *root_, o);
  EXPECT_TRUE(executed.empty());
  EXPECT_EQ(fs::last_write_time(checkpoint_weights(*root_ / manifest_->entries[1].checkpoint)), before);
  const auto n = manifest_->entries.size();
  ASSERT_EQ(m.entries.size(), 2 * n);  // append-only
  for (size_t i = n; i < m.entries.size(); ++i) EXPECT_EQ(m.entries[i].status, "cached");
}

TEST_F(PipelineTest, ReportRegenerationIsByteIdentical) {
  emit_report(*root_, *root_ / "r1");
  emit_report(*root_, *root_ / "r2");
  size_t files = 0;
  for (const auto& f : fs::recursive_directory_iterator(*root_ / "r1")) {
    if (!f.is_regular_file()) continue;
    const auto rel = fs::relative(f.path(), *root_ / "r1");
    EXPECT_EQ(slurp(f.path()), slurp(*root_ / "r2" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 3u);
}

TEST(Pipeline, InterruptAfterPhase1ResumesWithoutRetraining) {
  const auto root = fresh_dir("resume");
  const auto spec = tiny_spec();
  PipelineOptions stop;
  stop.before_stage = [](const std::string& stage, const std::string&) {
    if (stage == "phase2") throw TrainingError("interrupted");
  };
  EXPECT_THROW(run_pipeline(spec, root, stop), TrainingError);
  const auto partial = load_manifest(root / "manifest.json");
  EXPECT_EQ(count_status(partial, "failed"), 1);
  EXPECT_EQ(partial.entries.back().stage, "phase2");
  EXPECT_EQ(partial.entries.back().error, "interrupted");

  std::vector<std::string> executed;
  PipelineOptions resume;
  resume.before_stage = [&](const std::string& stage, const std::string&) { executed.push_back(stage); };
  run_pipeline(spec, root, resume);
  for (const auto& s : executed) {
    EXPECT_NE(s, "teacher");
    EXPECT_NE(s, "phase1");
    EXPECT_NE(s, "data");
  }
  EXPECT_NE(std::find(executed.begin(), executed.end(), "phase2"), executed.end());
}

TEST(Pipeline, NoResumeRetrainsEverything) {
  const auto root = fresh_dir("noresume");
  auto spec = tiny_spec();
  spec.baselines.clear();
  spec.eval_steps = {1};
  run_pipeline(spec, root, {});
  std::vector<std::string> executed;
  PipelineOptions o;
  o.reuse = false;
  o.before_stage = [&](const std::string& stage, const std::string&) { executed.push_back(stage); };
  run_pipeline(spec, root, o);
  EXPECT_NE(std::find(executed.begin(), executed.end(), "teacher"), executed.end());
  EXPECT_NE(std::find(executed.begin(), executed.end(), "phase1"), executed.end());
}

TEST(Pipeline, SameSeedReproducesMetrics) {
  auto spec = tiny_spec();
  spec.baselines.clear();
  spec.eval_steps = {1};
  const auto a = fresh_dir("repro_a");
  const auto b = fresh_dir("repro_b");
  run_pipeline(spec, a, {});
  run_pipeline(spec, b, {});
  const auto ta = build_table(load_manifest(a / "manifest.json"), a);
  const auto tb = build_table(load_manifest(b / "manifest.json"), b);
  ASSERT_EQ(ta.rows.size(), tb.rows.size());
  for (size_t i = 0; i < ta.rows.size(); ++i) {
    EXPECT_EQ(*ta.rows[i].median.sliced_wasserstein, *tb.rows[i].median.sliced_wasserstein) << ta.rows[i].label;
    EXPECT_EQ(*ta.rows[i].median.condition_mse, *tb.rows[i].median.condition_mse) << ta.rows[i].label;
  }
}

TEST(Ablation, RowsMirrorTheGrid) {
  const auto root = fresh_dir("ablate");
  auto spec = tiny_spec();
  spec.ablation.lambdas = {0.0, 10.0};
  const auto table = run_ablations(spec, root, {});
  for (const char* label : {"Adv.+No-Priming", "Adv.+LCM", "Adv.+POSE-I"}) {
    EXPECT_NE(table.find("priming", label, 1), nullptr) << label;
  }
  EXPECT_NE(table.find("lambda", "lambda=0", 1), nullptr);
  EXPECT_NE(table.find("lambda", "lambda=10", 1), nullptr);
  EXPECT_NE(table.find("backbone", "frozen", 1), nullptr);
  EXPECT_NE(table.find("backbone", "ema", 1), nullptr);
  EXPECT_NE(table.find("reference", "teacher", 2), nullptr);

  // The frozen row trains with decay 1; the ema row with the configured decay.
  const auto m = load_manifest(root / "manifest.json");
  std::set<double> decays;
  for (const auto& e : m.entries) {
    if (e.stage != "phase2" || e.label.rfind("backbone=", 0) != 0) continue;
    const auto material = nlohmann::json::parse(slurp(root / e.dir / "stage.json"))["material"];
    const double decay = material["phase2"]["ema_decay"].get<double>();
    EXPECT_EQ(decay, e.label == "backbone=frozen" ? 1.0 : spec.phase2.ema_decay);
    decays.insert(decay);
  }
  EXPECT_EQ(decays.size(), 2u);
}
