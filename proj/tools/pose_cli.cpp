// Command-line front end for the distillation pipeline.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "pose/baselines.hpp"
#include "pose/errors.hpp"
#include "pose/image.hpp"
#include "pose/report.hpp"
#include "pose/rng.hpp"
#include "pose/runner.hpp"

namespace fs = std::filesystem;
using namespace pose;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  bool resume = true;
  int64_t log_every = 50;
};

ExperimentSpec spec_of(const Globals& g) {
  ExperimentSpec spec = g.config.empty() ? ExperimentSpec{} : load_spec(g.config);
  if (g.seed) spec.seeds = {*g.seed};
  validate_spec(spec);
  return spec;
}

std::optional<fs::path> explicit_out(const Globals& g) {
  if (g.out.empty()) return std::nullopt;
  return fs::path(g.out);
}

// Single-stage commands write to --out, or to <output root>/<command>.
fs::path stage_out(const Globals& g, const ExperimentSpec& spec, const std::string& command) {
  if (!g.out.empty()) return g.out;
  return resolve_output_root(std::nullopt, spec) / command;
}

RunOptions options_for(const Globals& g, const ExperimentSpec& spec, const fs::path& dir) {
  RunOptions o;
  o.out_dir = dir;
  o.seed = g.seed.value_or(spec.seeds.front());
  o.checkpoint_every = spec.checkpoint_every;
  o.log_every = g.log_every;
  return o;
}

ClipBatch dataset_at(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw ConfigError("no dataset at " + dir);
  return load_dataset(dir);
}

VelocityNet checkpoint_at(const std::string& stem) {
  if (!checkpoint_exists(stem)) throw ConfigError("no checkpoint at " + stem);
  return load_checkpoint(stem);
}

void print_table(const ComparisonTable& table) {
  for (const auto& r : table.rows) {
    std::cout << r.group << "\t" << r.label << "\tnfe=" << r.nfe << "\tseeds=" << r.seeds.size();
    if (r.median.composite) std::cout << "\tcomposite=" << *r.median.composite;
    if (r.median.sliced_wasserstein) std::cout << "\tsw=" << *r.median.sliced_wasserstein;
    if (r.median.condition_mse) std::cout << "\tcond_mse=" << *r.median.condition_mse;
    std::cout << "\n";
  }
}

void print_report(const ReportResult& r, const fs::path& dir) {
  std::cout << "report: " << (dir / "summary.md").string() << " (" << r.table_rows << " rows, " << r.files.size()
            << " files)\n";
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pose: two-phase one-step distillation of a toy video flow model"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment JSON (defaults when omitted)");
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--out", g.out, "output directory or root");
  app.add_flag("--resume,!--no-resume", g.resume, "reuse completed stages (default on)");
  app.add_option("--log-every", g.log_every, "progress line every N steps (0 silences)");

  auto* data = app.add_subcommand("data", "render the train and test clip sets");

  std::string dataset;
  auto* teacher = app.add_subcommand("train-teacher", "train the multi-step teacher");
  teacher->add_option("--dataset", dataset, "dataset directory (from `data`)")->required();
  std::string validation;
  teacher->add_option("--validation", validation, "held-out dataset for the headroom check");

  std::string teacher_ckpt;
  auto* phase1 = app.add_subcommand("phase1", "stability priming");
  phase1->add_option("--teacher", teacher_ckpt, "teacher checkpoint stem")->required();
  phase1->add_option("--dataset", dataset)->required();

  std::string init_ckpt;
  auto* phase2 = app.add_subcommand("phase2", "unified adversarial equilibrium");
  phase2->add_option("--init", init_ckpt, "primed generator checkpoint stem")->required();
  phase2->add_option("--teacher", teacher_ckpt)->required();
  phase2->add_option("--dataset", dataset)->required();

  std::string method;
  auto* baseline = app.add_subcommand("baseline", "train a comparison method");
  baseline->add_option("--method", method, "lcm | add | dmd2")->required();
  baseline->add_option("--teacher", teacher_ckpt)->required();
  baseline->add_option("--dataset", dataset)->required();

  std::string ckpt;
  int64_t steps = 1;
  bool guided = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint stem")->required();
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--steps", steps, "sampling steps")->check(CLI::PositiveNumber);
  eval->add_flag("--guided", guided, "count two evaluations per step");

  auto* ablate = app.add_subcommand("ablate", "priming, lambda and backbone ablations");
  auto* pipeline = app.add_subcommand("pipeline", "data, teacher, both phases, baselines and evaluation");
  std::string report_dir;
  auto* report = app.add_subcommand("report", "summary, tables and figures from a run root");
  report->add_option("--dir", report_dir, "report directory (default <root>/report)");

  auto* config = app.add_subcommand("config", "print the effective configuration as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto spec = spec_of(g);
    if (config->parsed()) {
      std::cout << nlohmann::json(spec).dump(2) << "\n";
    } else if (data->parsed()) {
      const auto out = stage_out(g, spec, "data");
      const auto seed = g.seed.value_or(spec.data_seed);
      save_dataset(out / "train", make_moving_blob(spec.data, spec.data.train_clips, seed), spec.data, seed, "train");
      const auto test_seed = derive_seed(seed, 1);
      save_dataset(out / "test", make_moving_blob(spec.data, spec.data.test_clips, test_seed), spec.data, test_seed,
                   "test");
      std::cout << "datasets: " << (out / "train").string() << " " << (out / "test").string() << "\n";
    } else if (teacher->parsed()) {
      const auto out = stage_out(g, spec, "teacher");
      auto opts = options_for(g, spec, out);
      opts.seed = g.seed.value_or(spec.teacher_seed);
      const auto train = dataset_at(dataset);
      const auto val = validation.empty() ? ClipBatch{} : dataset_at(validation);
      const auto r = train_teacher(spec.teacher, spec.net, train, val, opts, spec.eval);
      if (val.size() >= 2) std::cout << "validation sw: 1-step " << r.sw_one_step << ", 40-step " << r.sw_many_steps << "\n";
      std::cout << "checkpoint: " << (out / "generator").string() << "\n";
    } else if (phase1->parsed()) {
      const auto out = stage_out(g, spec, "phase1");
      run_phase1(spec.phase1, checkpoint_at(teacher_ckpt), dataset_at(dataset), options_for(g, spec, out));
      std::cout << "checkpoint: " << (out / "generator").string() << "\n";
    } else if (phase2->parsed()) {
      const auto out = stage_out(g, spec, "phase2");
      run_phase2(spec.phase2, checkpoint_at(init_ckpt), checkpoint_at(teacher_ckpt), dataset_at(dataset),
                 options_for(g, spec, out));
      std::cout << "checkpoint: " << (out / "generator").string() << "\n";
    } else if (baseline->parsed()) {
      const auto m = parse_method(method);
      BaselineConfig cfg;
      cfg.method = m;
      for (const auto& b : spec.baselines) {
        if (b.method == m) cfg = b;
      }
      const auto out = stage_out(g, spec, method_tag(m));
      train_baseline(cfg, checkpoint_at(teacher_ckpt), dataset_at(dataset), options_for(g, spec, out));
      std::cout << "checkpoint: " << (out / "generator").string() << "\n";
    } else if (eval->parsed()) {
      auto opts = spec.eval;
      opts.guided = opts.guided || guided;
      const auto result = evaluate(checkpoint_at(ckpt), dataset_at(dataset), steps, opts);
      const fs::path out = g.out.empty() ? fs::path("report.json") : fs::path(g.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      std::ofstream(out) << nlohmann::json(result.report).dump(2) << "\n";
      auto stem = out;
      stem.replace_extension();
      const auto shown = result.samples.slice(0, 0, std::min<int64_t>(8, result.samples.size(0)));
      write_png_grid(stem.string() + ".png", shown);
      write_gif(stem.string() + ".gif", shown);
      std::cout << nlohmann::json(result.report).dump(2) << "\n";
    } else if (ablate->parsed()) {
      const auto root = resolve_output_root(explicit_out(g), spec);
      PipelineOptions po;
      po.reuse = g.resume;
      po.log_every = g.log_every;
      print_table(run_ablations(spec, root, po));
      print_report(emit_report(root, root / "report"), root / "report");
    } else if (pipeline->parsed()) {
      const auto root = resolve_output_root(explicit_out(g), spec);
      PipelineOptions po;
      po.reuse = g.resume;
      po.log_every = g.log_every;
      const auto manifest = run_pipeline(spec, root, po);
      print_table(build_table(manifest, root));
      print_report(emit_report(root, root / "report"), root / "report");
    } else if (report->parsed()) {
      const auto root = resolve_output_root(explicit_out(g), spec);
      const fs::path dir = report_dir.empty() ? root / "report" : fs::path(report_dir);
      print_report(emit_report(root, dir), dir);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return 2;
  } catch (const EvaluationError& e) {
    std::cerr << "evaluation failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
