#include "pose/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "pose/errors.hpp"
#include "pose/rng.hpp"

#ifndef POSE_CODE_VERSION
#define POSE_CODE_VERSION "unknown"
#endif

namespace pose {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

void to_json(nlohmann::json& j, const TeacherConfig& c) {
  j = nlohmann::json{{"steps", c.steps},         {"batch", c.batch},
                     {"lr", c.lr},               {"betas", c.betas},
                     {"t_lo", c.t_lo},           {"t_hi", c.t_hi},
                     {"ema_decay", c.ema_decay}, {"validate_clips", c.validate_clips}};
}

void from_json(const nlohmann::json& j, TeacherConfig& c) {
  TeacherConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.betas = j.value("betas", d.betas);
  c.t_lo = j.value("t_lo", d.t_lo);
  c.t_hi = j.value("t_hi", d.t_hi);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.validate_clips = j.value("validate_clips", d.validate_clips);
}

void to_json(nlohmann::json& j, const AblationGrid& g) {
  j = nlohmann::json{{"phase1", g.phase1}, {"lambdas", g.lambdas}, {"backbones", g.backbones}};
}

void from_json(const nlohmann::json& j, AblationGrid& g) {
  AblationGrid d;
  g.phase1 = j.value("phase1", d.phase1);
  g.lambdas = j.value("lambdas", d.lambdas);
  g.backbones = j.value("backbones", d.backbones);
}

std::vector<BaselineConfig> default_baselines() {
  std::vector<BaselineConfig> out;
  for (auto m : {BaselineMethod::kLcm, BaselineMethod::kAdd, BaselineMethod::kDmd2}) {
    BaselineConfig c;
    c.method = m;
    out.push_back(c);
  }
  return out;
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{{"data", s.data},
                     {"net", s.net},
                     {"teacher", s.teacher},
                     {"phase1", s.phase1},
                     {"phase2", s.phase2},
                     {"baselines", s.baselines},
                     {"ablation", s.ablation},
                     {"seeds", s.seeds},
                     {"data_seed", s.data_seed},
                     {"teacher_seed", s.teacher_seed},
                     {"eval", s.eval},
                     {"weights", s.weights},
                     {"eval_steps", s.eval_steps},
                     {"reference_steps", s.reference_steps},
                     {"checkpoint_every", s.checkpoint_every},
                     {"output_root", s.output_root}};
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  ExperimentSpec d;
  s.data = j.value("data", d.data);
  s.net = j.value("net", d.net);
  s.teacher = j.value("teacher", d.teacher);
  s.phase1 = j.value("phase1", d.phase1);
  s.phase2 = j.value("phase2", d.phase2);
  s.baselines = j.value("baselines", d.baselines);
  s.ablation = j.value("ablation", d.ablation);
  s.seeds = j.value("seeds", d.seeds);
  s.data_seed = j.value("data_seed", d.data_seed);
  s.teacher_seed = j.value("teacher_seed", d.teacher_seed);
  s.eval = j.value("eval", d.eval);
  s.weights = j.value("weights", d.weights);
  s.eval_steps = j.value("eval_steps", d.eval_steps);
  s.reference_steps = j.value("reference_steps", d.reference_steps);
  s.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  s.output_root = j.value("output_root", d.output_root);
  // The network always matches the data it models.
  s.net.channels = s.data.channels;
  s.net.height = s.data.height;
  s.net.width = s.data.width;
  s.net.shape_classes = s.data.shape_classes;
  s.net.colors = s.data.colors;
}

void validate_spec(const ExperimentSpec& spec) {
  const auto fail = [](const std::string& msg) { throw ConfigError("invalid spec: " + msg); };
  if (spec.seeds.empty()) fail("seeds must be non-empty");
  if (spec.eval_steps.empty()) fail("eval_steps must be non-empty");
  for (auto s : spec.eval_steps) {
    if (s < 1) fail("eval_steps must be >= 1");
  }
  if (spec.reference_steps < 1) fail("reference_steps must be >= 1");
  if (spec.data.frames < 3) fail("data.frames must be >= 3 for temporal metrics");
  try {
    make_moving_blob(spec.data, 0, 0);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (spec.data.height % spec.net.patch != 0 || spec.data.width % spec.net.patch != 0) {
    fail("resolution must be divisible by net.patch");
  }
  if (spec.net.dim % spec.net.heads != 0) fail("net.dim must be divisible by net.heads");
  if (spec.data.teacher_mix < 0.0 || spec.data.teacher_mix > 1.0) fail("data.teacher_mix must be in [0, 1]");
  if (spec.teacher.steps < 0 || spec.phase1.steps < 0 || spec.phase2.steps < 0) fail("negative step budget");
  if (spec.phase2.ema_decay < 0.0 || spec.phase2.ema_decay > 1.0) fail("phase2.ema_decay must be in [0, 1]");
  for (double l : spec.ablation.lambdas) {
    if (l < 0.0) fail("ablation lambdas must be non-negative");
  }
  for (const auto& p : spec.ablation.phase1) {
    if (p != "none" && p != "lcm" && p != "pose-I") fail("unknown phase1 ablation '" + p + "'");
  }
  for (const auto& b : spec.ablation.backbones) {
    if (b != "frozen" && b != "ema") fail("unknown backbone ablation '" + b + "'");
  }
  if (spec.eval.n_projections < 1 || spec.eval.batch < 1) fail("eval options must be positive");
}

ExperimentSpec load_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  ExperimentSpec spec;
  try {
    spec = nlohmann::json::parse(in).get<ExperimentSpec>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  validate_spec(spec);
  return spec;
}

std::string json_hash(const nlohmann::json& j) {
  const auto text = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string spec_hash(const ExperimentSpec& spec) {
  nlohmann::json j = spec;
  j.erase("output_root");  // where results go is not part of what they are
  return json_hash(j);
}

fs::path resolve_output_root(const std::optional<fs::path>& explicit_root, const ExperimentSpec& spec) {
  if (explicit_root) return *explicit_root;
  if (const char* env = std::getenv("POSE_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  return spec.output_root;
}

// ---------------------------------------------------------------------------
// Teacher

TeacherResult train_teacher(const TeacherConfig& config, const NetConfig& net_config,
                            const ClipBatch& train, const ClipBatch& validation,
                            const RunOptions& options, const EvalOptions& eval) {
  if (train.size() < 1) throw std::invalid_argument("train_teacher: empty dataset");
  torch::manual_seed(options.seed);
  auto gen = make_generator(derive_seed(options.seed, 1));
  VelocityNet net(net_config);
  auto opt = make_adam(net->parameters(), config.lr, config.betas);
  std::optional<EmaBackbone> ema;
  if (config.ema_decay > 0.0) ema = EmaBackbone::create(net, config.ema_decay);
  MetricsWriter metrics(options.out_dir.empty() ? fs::path() : options.out_dir / "metrics.jsonl");
  CheckpointKeeper keeper(options, "teacher", "teacher");
  auto field = as_field(net);

  for (int64_t step = 0; step < config.steps; ++step) {
    const auto batch = train.select(sample_indices(train.size(), config.batch, gen));
    const auto t = sample_levels(batch.size(), config.t_lo, config.t_hi, gen);
    const auto eps = torch::randn(batch.video.sizes(), gen, batch.video.options());
    const auto loss = diffusion_loss(field, batch.video, eps, t, batch.condition());
    nlohmann::json row{{"step", step}, {"loss", loss.item<double>()}};
    require_finite(loss.item<double>(), "teacher loss", step, row, options.out_dir);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (ema) backbone_refresh(net, *ema);
    metrics.write(row);
    if (options.log_every > 0 && (step + 1) % options.log_every == 0) {
      std::cout << "[teacher] step " << step + 1 << " loss " << row["loss"].get<double>() << std::endl;
    }
    keeper.maybe_save(ema ? ema->net : net, step + 1);
  }

  TeacherResult result;
  result.net = ema ? ema->net : net;
  set_requires_grad(*result.net, false);
  if (validation.size() >= 2) {
    const auto val = validation.slice(0, std::max<int64_t>(2, config.validate_clips));
    result.sw_one_step = *evaluate(result.net, val, 1, eval).report.sliced_wasserstein;
    result.sw_many_steps = *evaluate(result.net, val, 40, eval).report.sliced_wasserstein;
    result.has_headroom = result.sw_many_steps < result.sw_one_step;
    if (!result.has_headroom) {
      std::cerr << "warning: teacher 40-step SW " << result.sw_many_steps << " does not beat 1-step SW "
                << result.sw_one_step << "; distillation has no headroom" << std::endl;
    }
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "generator", result.net, {"teacher", "teacher", config.steps, options.seed});
    std::ofstream(options.out_dir / "validation.json")
        << nlohmann::json{{"sw_1", result.sw_one_step}, {"sw_40", result.sw_many_steps}, {"headroom", result.has_headroom}}.dump(2)
        << "\n";
  }
  return result;
}

ClipBatch mix_teacher_samples(const ClipBatch& real, const VelocityNet& teacher, double fraction,
                              int64_t steps, uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("teacher mix fraction must be in [0, 1]");
  ClipBatch out = real;
  out.video = real.video.clone();
  const auto n = static_cast<int64_t>(std::llround(fraction * static_cast<double>(real.size())));
  if (n == 0) return out;
  auto gen = make_generator(seed);
  const auto idx = torch::randperm(real.size(), gen, torch::TensorOptions().dtype(torch::kLong)).slice(0, 0, n);
  const auto chosen = real.select(idx);
  const auto noise = torch::randn(chosen.video.sizes(), gen, chosen.video.options());
  torch::NoGradGuard no_grad;
  auto field = as_field(teacher);
  std::vector<torch::Tensor> parts;
  for (int64_t b = 0; b < n; b += 64) {
    const int64_t e = std::min(n, b + 64);
    parts.push_back(euler_sample(field, noise.slice(0, b, e), steps, chosen.slice(b, e).condition()).x);
  }
  auto generated = torch::cat(parts, 0).clamp(-1.0, 1.0);
  const auto m = chosen.mask.to(generated.dtype()).reshape({1, -1, 1, 1, 1});
  generated = m * chosen.video + (1 - m) * generated;
  out.video.index_copy_(0, idx, generated);
  out.condition_frame = out.video.select(1, 0).clone();
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"stage", e.stage},         {"group", e.group},       {"label", e.label},
                     {"seed", e.seed},           {"nfe", e.nfe},           {"key", e.key},
                     {"spec_hash", e.spec_hash}, {"dir", e.dir},           {"checkpoint", e.checkpoint},
                     {"metrics", e.metrics},     {"report", e.report},     {"samples", e.samples},
                     {"status", e.status},       {"error", e.error},       {"started", e.started},
                     {"finished", e.finished}};
}

void from_json(const nlohmann::json& j, ManifestEntry& e) {
  e.stage = j.value("stage", "");
  e.group = j.value("group", "");
  e.label = j.value("label", "");
  e.seed = j.value("seed", uint64_t{0});
  e.nfe = j.value("nfe", int64_t{0});
  e.key = j.value("key", "");
  e.spec_hash = j.value("spec_hash", "");
  e.dir = j.value("dir", "");
  e.checkpoint = j.value("checkpoint", "");
  e.metrics = j.value("metrics", "");
  e.report = j.value("report", "");
  e.samples = j.value("samples", "");
  e.status = j.value("status", "");
  e.error = j.value("error", "");
  e.started = j.value("started", "");
  e.finished = j.value("finished", "");
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"spec_hash", m.spec_hash},
                     {"code_version", m.code_version},
                     {"created", m.created},
                     {"reference", m.reference ? nlohmann::json(*m.reference) : nlohmann::json(nullptr)},
                     {"weights", m.weights},
                     {"entries", m.entries}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  m.spec_hash = j.value("spec_hash", "");
  m.code_version = j.value("code_version", "");
  m.created = j.value("created", "");
  if (j.contains("reference") && !j.at("reference").is_null()) {
    m.reference = j.at("reference").get<CompositeReference>();
  } else {
    m.reference.reset();
  }
  m.weights = j.value("weights", CompositeWeights{});
  m.entries = j.value("entries", std::vector<ManifestEntry>{});
}

RunManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest not found: " + path.string());
  return nlohmann::json::parse(in).get<RunManifest>();
}

void write_manifest(const RunManifest& manifest, const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    out << nlohmann::json(manifest).dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write manifest " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Comparison tables

const ComparisonRow* ComparisonTable::find(const std::string& group, const std::string& label,
                                           int64_t nfe) const {
  for (const auto& r : rows) {
    if (r.group == group && r.label == label && r.nfe == nfe) return &r;
  }
  return nullptr;
}

namespace {

std::optional<double> median_of(const std::vector<EvalReport>& reports,
                                std::optional<double> EvalReport::*field) {
  std::vector<double> v;
  for (const auto& r : reports) {
    if (r.*field) v.push_back(*(r.*field));
  }
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ComparisonTable build_table(const RunManifest& manifest, const fs::path& root,
                            std::vector<std::string>* warnings) {
  ComparisonTable table;
  table.reference = manifest.reference;
  // Latest entry per (group, label, nfe, seed), in order of first appearance.
  std::vector<std::tuple<std::string, std::string, int64_t>> order;
  std::map<std::tuple<std::string, std::string, int64_t>, std::map<uint64_t, const ManifestEntry*>> latest;
  for (const auto& e : manifest.entries) {
    if (e.stage != "eval" || e.spec_hash != manifest.spec_hash) continue;
    if (e.status != "done" && e.status != "cached") continue;
    const auto k = std::make_tuple(e.group, e.label, e.nfe);
    if (latest.find(k) == latest.end()) order.push_back(k);
    latest[k][e.seed] = &e;
  }
  for (const auto& k : order) {
    ComparisonRow row;
    std::tie(row.group, row.label, row.nfe) = k;
    for (const auto& [seed, entry] : latest[k]) {
      std::ifstream in(root / entry->report);
      if (!in) {
        if (warnings) warnings->push_back("missing report for " + row.label + " (seed " + std::to_string(seed) + "): " + entry->report);
        continue;
      }
      auto report = nlohmann::json::parse(in).get<EvalReport>();
      if (table.reference) {
        try {
          report.composite = composite_score(report, *table.reference, manifest.weights);
        } catch (const EvaluationError& e) {
          if (warnings) warnings->push_back(row.label + ": " + e.what());
        }
      }
      row.seeds.push_back(seed);
      row.per_seed.push_back(report);
    }
    if (row.per_seed.empty()) continue;
    auto& m = row.median;
    m.sliced_wasserstein = median_of(row.per_seed, &EvalReport::sliced_wasserstein);
    m.mmd_rbf = median_of(row.per_seed, &EvalReport::mmd_rbf);
    m.feature_sw = median_of(row.per_seed, &EvalReport::feature_sw);
    m.feature_mmd = median_of(row.per_seed, &EvalReport::feature_mmd);
    m.motion_smoothness = median_of(row.per_seed, &EvalReport::motion_smoothness);
    m.subject_consistency = median_of(row.per_seed, &EvalReport::subject_consistency);
    m.condition_mse = median_of(row.per_seed, &EvalReport::condition_mse);
    m.dynamic_degree = median_of(row.per_seed, &EvalReport::dynamic_degree);
    m.composite = median_of(row.per_seed, &EvalReport::composite);
    m.nfe = row.per_seed.front().nfe;
    std::vector<double> times;
    for (const auto& r : row.per_seed) times.push_back(r.wall_time_s);
    std::sort(times.begin(), times.end());
    m.wall_time_s = times[times.size() / 2];
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

std::string now_iso() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string format_lambda(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

struct Stage {
  std::string key;
  fs::path dir;
  fs::path checkpoint() const { return dir / "generator"; }
};

class Runner {
 public:
  Runner(const ExperimentSpec& spec, fs::path root, const PipelineOptions& options)
      : spec_(spec), root_(std::move(root)), options_(options) {
    validate_spec(spec_);
    fs::create_directories(root_);
    if (fs::exists(manifest_path())) manifest_ = load_manifest(manifest_path());
    if (manifest_.created.empty()) manifest_.created = now_iso();
    manifest_.spec_hash = spec_hash(spec_);
    manifest_.code_version = POSE_CODE_VERSION;
    manifest_.weights = spec_.weights;
    write_manifest(manifest_, manifest_path());
  }

  const RunManifest& manifest() const { return manifest_; }
  const fs::path& root() const { return root_; }

  Stage data() {
    if (data_) return *data_;
    const nlohmann::json material{{"data", spec_.data}, {"seed", spec_.data_seed}};
    data_ = run("data", "pipeline", "data", spec_.data_seed, 0, material, [&](const fs::path& dir) {
      save_dataset(dir / "train", make_moving_blob(spec_.data, spec_.data.train_clips, spec_.data_seed), spec_.data,
                   spec_.data_seed, "train");
      const auto test_seed = derive_seed(spec_.data_seed, 1);
      save_dataset(dir / "test", make_moving_blob(spec_.data, spec_.data.test_clips, test_seed), spec_.data, test_seed,
                   "test");
    });
    return *data_;
  }

  Stage teacher() {
    if (teacher_) return *teacher_;
    const auto d = data();
    const nlohmann::json material{{"data", d.key}, {"net", spec_.net}, {"teacher", spec_.teacher}, {"seed", spec_.teacher_seed}};
    teacher_ = run("teacher", "pipeline", "teacher", spec_.teacher_seed, 0, material, [&](const fs::path& dir) {
      train_teacher(spec_.teacher, spec_.net, train_set(), test_set(), run_options(dir, spec_.teacher_seed), spec_.eval);
    });
    return *teacher_;
  }

  Stage distill_data() {
    if (distill_) return *distill_;
    const auto t = teacher();
    const nlohmann::json material{{"data", data().key}, {"teacher", t.key}, {"mix", spec_.data.teacher_mix}, {"steps", spec_.reference_steps}};
    distill_ = run("distill_data", "pipeline", "distill_data", spec_.data_seed, 0, material, [&](const fs::path& dir) {
      const auto mixed = mix_teacher_samples(train_set(), load_checkpoint(t.checkpoint()), spec_.data.teacher_mix,
                                             spec_.reference_steps, derive_seed(spec_.data_seed, 2));
      save_dataset(dir, mixed, spec_.data, spec_.data_seed, "distill");
    });
    return *distill_;
  }

  // Teacher at reference_steps sets the composite normalisers.
  void reference() {
    const auto t = teacher();
    const auto e = eval(t, spec_.reference_steps, "reference", "teacher", spec_.teacher_seed);
    std::ifstream in(e.dir / "report.json");
    const auto report = nlohmann::json::parse(in).get<EvalReport>();
    manifest_.reference = CompositeReference::from_report(report);
    write_manifest(manifest_, manifest_path());
  }

  Stage phase1_pose(uint64_t seed) {
    const auto t = teacher();
    const auto dd = distill_data();
    const nlohmann::json material{{"teacher", t.key}, {"data", dd.key}, {"phase1", spec_.phase1}, {"seed", seed}};
    return run("phase1", "pipeline", "pose-I", seed, 0, material, [&](const fs::path& dir) {
      run_phase1(spec_.phase1, load_checkpoint(t.checkpoint()), distill_set(), run_options(dir, seed));
    });
  }

  // LCM in the priming slot: same step budget and batch as Phase I.
  Stage phase1_lcm(uint64_t seed) {
    auto cfg = lcm_config();
    cfg.steps = spec_.phase1.steps;
    cfg.batch = spec_.phase1.batch;
    const auto t = teacher();
    const auto dd = distill_data();
    const nlohmann::json material{{"teacher", t.key}, {"data", dd.key}, {"lcm", cfg}, {"seed", seed}};
    return run("lcm", "pipeline", "lcm-priming", seed, 0, material, [&](const fs::path& dir) {
      train_lcm(cfg, load_checkpoint(t.checkpoint()), distill_set(), run_options(dir, seed));
    });
  }

  Stage phase2(const Stage& init, const Phase2Config& cfg, uint64_t seed, const std::string& label) {
    const auto t = teacher();
    const auto dd = distill_data();
    const nlohmann::json material{{"init", init.key}, {"teacher", t.key}, {"data", dd.key}, {"phase2", cfg}, {"seed", seed}};
    return run("phase2", "pipeline", label, seed, 0, material, [&](const fs::path& dir) {
      run_phase2(cfg, load_checkpoint(init.checkpoint()), load_checkpoint(t.checkpoint()), distill_set(),
                 run_options(dir, seed));
    });
  }

  Stage baseline(const BaselineConfig& cfg, uint64_t seed) {
    const auto t = teacher();
    const auto dd = distill_data();
    const nlohmann::json material{{"teacher", t.key}, {"data", dd.key}, {"baseline", cfg}, {"seed", seed}};
    return run("baseline", "pipeline", method_tag(cfg.method), seed, 0, material, [&](const fs::path& dir) {
      train_baseline(cfg, load_checkpoint(t.checkpoint()), distill_set(), run_options(dir, seed));
    });
  }

  Stage eval(const Stage& model, int64_t steps, const std::string& group, const std::string& label, uint64_t seed) {
    const nlohmann::json material{{"model", model.key}, {"test", data().key}, {"steps", steps}, {"eval", spec_.eval}};
    return run("eval", group, label, seed, reported_nfe(steps, spec_.eval.guided), material, [&](const fs::path& dir) {
      const auto result = evaluate(load_checkpoint(model.checkpoint()), test_set(), steps, spec_.eval);
      std::ofstream(dir / "report.json") << nlohmann::json(result.report).dump(2) << "\n";
      torch::save(result.samples.slice(0, 0, 8).contiguous(), (dir / "samples.pt").string());
    });
  }

 private:
  fs::path manifest_path() const { return root_ / "manifest.json"; }

  RunOptions run_options(const fs::path& dir, uint64_t seed) {
    RunOptions o;
    o.out_dir = dir;
    o.seed = seed;
    o.checkpoint_every = spec_.checkpoint_every;
    o.log_every = options_.log_every;
    // Best snapshot by 1-NFE sliced Wasserstein on a fixed slice of train.
    const auto probe = train_set().slice(0, std::min<int64_t>(64, train_set().size()));
    const auto eval = spec_.eval;
    o.scorer = [probe, eval](const VelocityNet& net) {
      return evaluate(net, probe, 1, eval).report.sliced_wasserstein.value_or(0.0);
    };
    return o;
  }

  BaselineConfig lcm_config() const {
    for (const auto& b : spec_.baselines) {
      if (b.method == BaselineMethod::kLcm) return b;
    }
    return BaselineConfig{};
  }

  const ClipBatch& train_set() {
    if (!train_) train_ = load_dataset(data().dir / "train");
    return *train_;
  }
  const ClipBatch& test_set() {
    if (!test_) test_ = load_dataset(data().dir / "test");
    return *test_;
  }
  const ClipBatch& distill_set() {
    if (!distill_set_) distill_set_ = load_dataset(distill_data().dir);
    return *distill_set_;
  }

  template <typename Body>
  Stage run(const std::string& stage, const std::string& group, const std::string& label, uint64_t seed,
            int64_t nfe, const nlohmann::json& material, Body&& body) {
    Stage s{json_hash(material), root_ / "stages" / (stage + "-" + json_hash(material))};
    ManifestEntry e;
    e.stage = stage;
    e.group = group;
    e.label = label;
    e.seed = seed;
    e.nfe = nfe;
    e.key = s.key;
    e.spec_hash = manifest_.spec_hash;
    e.dir = fs::relative(s.dir, root_).string();
    const auto rel = [&](const std::string& name) { return (fs::path(e.dir) / name).string(); };
    const bool trains = stage != "data" && stage != "distill_data" && stage != "eval";
    if (trains) {
      e.checkpoint = rel("generator");
      e.metrics = rel("metrics.jsonl");
    }
    if (stage == "eval") {
      e.report = rel("report.json");
      e.samples = rel("samples.pt");
    }
    const auto marker = s.dir / "stage.json";
    if (options_.reuse && fs::exists(marker)) {
      e.status = "cached";
      e.started = e.finished = now_iso();
      record(e);
      return s;
    }
    e.started = now_iso();
    try {
      if (options_.before_stage) options_.before_stage(stage, label);
      fs::remove_all(s.dir);
      fs::create_directories(s.dir);
      if (options_.log_every > 0) std::cout << "[stage] " << stage << " " << label << " seed " << seed << std::endl;
      body(s.dir);
    } catch (const std::exception& ex) {
      e.status = "failed";
      e.error = ex.what();
      e.finished = now_iso();
      record(e);
      throw;
    }
    std::ofstream(marker) << nlohmann::json{{"stage", stage}, {"key", s.key}, {"material", material}}.dump(2) << "\n";
    e.status = "done";
    e.finished = now_iso();
    record(e);
    return s;
  }

  void record(const ManifestEntry& e) {
    manifest_.entries.push_back(e);
    write_manifest(manifest_, manifest_path());
  }

  ExperimentSpec spec_;
  fs::path root_;
  PipelineOptions options_;
  RunManifest manifest_;
  std::optional<Stage> data_, teacher_, distill_;
  std::optional<ClipBatch> train_, test_, distill_set_;
};

}  // namespace

RunManifest run_pipeline(const ExperimentSpec& spec, const fs::path& root, const PipelineOptions& options) {
  Runner r(spec, root, options);
  r.distill_data();
  r.reference();
  for (auto steps : spec.eval_steps) r.eval(r.teacher(), steps, "pipeline", "teacher", spec.teacher_seed);
  for (auto seed : spec.seeds) {
    const auto p2 = r.phase2(r.phase1_pose(seed), spec.phase2, seed, "pose");
    for (auto steps : spec.eval_steps) r.eval(p2, steps, "pipeline", "pose", seed);
    for (const auto& b : spec.baselines) {
      const auto s = r.baseline(b, seed);
      for (auto steps : spec.eval_steps) r.eval(s, steps, "pipeline", method_tag(b.method), seed);
    }
  }
  return r.manifest();
}

ComparisonTable run_ablations(const ExperimentSpec& spec, const fs::path& root, const PipelineOptions& options) {
  Runner r(spec, root, options);
  r.distill_data();
  r.reference();
  r.eval(r.teacher(), 1, "priming", "No-Training", spec.teacher_seed);
  for (auto seed : spec.seeds) {
    const auto pose1 = r.phase1_pose(seed);
    for (const auto& p : spec.ablation.phase1) {
      Stage init = p == "none" ? r.teacher() : p == "lcm" ? r.phase1_lcm(seed) : pose1;
      const std::string label = p == "none" ? "Adv.+No-Priming" : p == "lcm" ? "Adv.+LCM" : "Adv.+POSE-I";
      r.eval(r.phase2(init, spec.phase2, seed, label), 1, "priming", label, seed);
      if (p != "none") r.eval(init, 1, "priming", p == "lcm" ? "LCM" : "POSE-I", seed);
    }
    for (double lambda : spec.ablation.lambdas) {
      auto cfg = spec.phase2;
      cfg.lambda = lambda;
      const auto label = "lambda=" + format_lambda(lambda);
      r.eval(r.phase2(pose1, cfg, seed, label), 1, "lambda", label, seed);
    }
    for (const auto& b : spec.ablation.backbones) {
      auto cfg = spec.phase2;
      if (b == "frozen") cfg.ema_decay = 1.0;
      r.eval(r.phase2(pose1, cfg, seed, "backbone=" + b), 1, "backbone", b, seed);
    }
  }
  auto table = build_table(r.manifest(), r.root());
  std::erase_if(table.rows, [](const ComparisonRow& row) {
    return row.group != "priming" && row.group != "lambda" && row.group != "backbone" && row.group != "reference";
  });
  return table;
}

}  // namespace pose
