#pragma once

// Experiment orchestration: JSON experiment specs, content-addressed stage
// caching, the teacher -> phase1 -> phase2 -> eval pipeline, ablation grids
// and the append-only run manifest.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pose/baselines.hpp"
#include "pose/data.hpp"
#include "pose/metrics.hpp"
#include "pose/nets.hpp"
#include "pose/phase1.hpp"
#include "pose/phase2.hpp"
#include "pose/train_common.hpp"

namespace pose {

struct TeacherConfig {
  int64_t steps = 4000;
  int64_t batch = 32;
  double lr = 5e-4;
  std::array<double, 2> betas{0.9, 0.999};
  double t_lo = 0.02;
  double t_hi = 0.98;
  double ema_decay = 0.999;  // 0 disables the weight average
  int64_t validate_clips = 64;
};

void to_json(nlohmann::json& j, const TeacherConfig& c);
void from_json(const nlohmann::json& j, TeacherConfig& c);

struct AblationGrid {
  std::vector<std::string> phase1{"none", "lcm", "pose-I"};
  std::vector<double> lambdas{0.0, 2.5, 10.0, 100.0};
  std::vector<std::string> backbones{"frozen", "ema"};
};

void to_json(nlohmann::json& j, const AblationGrid& g);
void from_json(const nlohmann::json& j, AblationGrid& g);

// One config per comparison method with library defaults.
std::vector<BaselineConfig> default_baselines();

struct ExperimentSpec {
  DataConfig data;
  NetConfig net;
  TeacherConfig teacher;
  Phase1Config phase1;
  Phase2Config phase2;
  std::vector<BaselineConfig> baselines = default_baselines();
  AblationGrid ablation;
  std::vector<uint64_t> seeds{0, 1, 2};
  uint64_t data_seed = 1234;
  uint64_t teacher_seed = 0;
  EvalOptions eval;
  CompositeWeights weights;
  std::vector<int64_t> eval_steps{1, 4, 40};
  int64_t reference_steps = 40;
  int64_t checkpoint_every = 100;
  std::string output_root = "runs";
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);

// Throws ConfigError on inconsistent specs.
void validate_spec(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::filesystem::path& path);

// FNV-1a of the canonical (key-sorted, compact) JSON dump, as 16 hex digits.
std::string json_hash(const nlohmann::json& j);
std::string spec_hash(const ExperimentSpec& spec);

// Output root: explicit value, else $POSE_OUTPUT_ROOT, else the spec's root.
std::filesystem::path resolve_output_root(const std::optional<std::filesystem::path>& explicit_root,
                                          const ExperimentSpec& spec);

struct TeacherResult {
  VelocityNet net{nullptr};
  double sw_one_step = 0.0;
  double sw_many_steps = 0.0;
  bool has_headroom = false;
};

// Flow-matching training of a fresh VelocityNet. Warns (does not throw) when
// many-step samples fail to beat single-step samples on sliced Wasserstein.
TeacherResult train_teacher(const TeacherConfig& config, const NetConfig& net,
                            const ClipBatch& train, const ClipBatch& validation,
                            const RunOptions& options, const EvalOptions& eval = {});

// Replaces a `fraction` of the clips with teacher samples under the same
// conditions; conditional frames are kept from the real clips.
ClipBatch mix_teacher_samples(const ClipBatch& real, const VelocityNet& teacher, double fraction,
                              int64_t steps, uint64_t seed);

struct ManifestEntry {
  std::string stage;   // data, teacher, phase1, lcm, phase2, baseline, eval, ...
  std::string group;   // pipeline, priming, lambda, backbone, reference
  std::string label;   // row name
  uint64_t seed = 0;
  int64_t nfe = 0;
  std::string key;
  std::string spec_hash;
  std::string dir;
  std::string checkpoint;
  std::string metrics;
  std::string report;
  std::string samples;
  std::string status;  // done, cached, failed
  std::string error;
  std::string started;
  std::string finished;
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);

struct RunManifest {
  std::string spec_hash;
  std::string code_version;
  std::string created;
  std::optional<CompositeReference> reference;
  CompositeWeights weights;
  std::vector<ManifestEntry> entries;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);
RunManifest load_manifest(const std::filesystem::path& path);
// Written to a temporary file and renamed into place.
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

struct PipelineOptions {
  bool reuse = true;       // reuse completed stages with matching keys
  int64_t log_every = 0;
  // Called before a stage executes (not when cached); tests use it to interrupt.
  std::function<void(const std::string& stage, const std::string& label)> before_stage;
};

struct ComparisonRow {
  std::string group;
  std::string label;
  int64_t nfe = 0;
  std::vector<uint64_t> seeds;
  std::vector<EvalReport> per_seed;
  EvalReport median;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::optional<CompositeReference> reference;

  const ComparisonRow* find(const std::string& group, const std::string& label, int64_t nfe) const;
};

// Median over seeds of every eval entry of the manifest's current spec; entry
// paths are relative to `root`. Missing report files are skipped and
// reported through `warnings`.
ComparisonTable build_table(const RunManifest& manifest, const std::filesystem::path& root,
                            std::vector<std::string>* warnings = nullptr);

// data -> teacher -> phase1 -> phase2 -> eval at spec.eval_steps, per seed,
// plus the configured baselines. Writes <root>/manifest.json incrementally.
RunManifest run_pipeline(const ExperimentSpec& spec, const std::filesystem::path& root,
                         const PipelineOptions& options = {});

// Priming grid, lambda grid and backbone rows at one NFE.
ComparisonTable run_ablations(const ExperimentSpec& spec, const std::filesystem::path& root,
                              const PipelineOptions& options = {});

}  // namespace pose
