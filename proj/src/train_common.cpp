#include "pose/train_common.hpp"

#include <cmath>
#include <sstream>

#include "pose/errors.hpp"

namespace pose {

namespace fs = std::filesystem;

MetricsWriter::MetricsWriter(const fs::path& path) {
  if (path.empty()) return;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
}

void MetricsWriter::write(const nlohmann::json& row) {
  if (out_) {
    *out_ << row.dump() << "\n";
    out_->flush();
  }
}

std::vector<nlohmann::json> read_metrics(const fs::path& path) {
  std::vector<nlohmann::json> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

CheckpointKeeper::CheckpointKeeper(const RunOptions& options, std::string role, std::string tag)
    : options_(options), role_(std::move(role)), tag_(std::move(tag)) {}

void CheckpointKeeper::maybe_save(const VelocityNet& net, int64_t step) {
  if (options_.out_dir.empty() || options_.checkpoint_every <= 0 || step == 0 ||
      step % options_.checkpoint_every != 0) {
    return;
  }
  const auto dir = options_.out_dir / "checkpoints";
  const auto stem = dir / ("step_" + std::to_string(step));
  save_checkpoint(stem, net, {role_, tag_, step, options_.seed});
  recent_.push_back(stem);

  if (options_.scorer) {
    const double score = options_.scorer(net);
    if (!best_ || score < best_score_) {
      best_score_ = score;
      const auto best_stem = dir / "best";
      save_checkpoint(best_stem, net, {role_, tag_, step, options_.seed});
      best_ = best_stem;
    }
  }
  while (static_cast<int64_t>(recent_.size()) > options_.keep_last) {
    fs::remove(checkpoint_weights(recent_.front()));
    fs::remove(checkpoint_sidecar(recent_.front()));
    recent_.erase(recent_.begin());
  }
}

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, double lr,
                             const std::array<double, 2>& betas) {
  return torch::optim::Adam(
      params, torch::optim::AdamOptions(lr).betas(std::make_tuple(betas[0], betas[1])));
}

double grad_norm(const std::vector<torch::Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) total += p.grad().detach().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(total);
}

void require_finite(double value, const std::string& what, int64_t step,
                    const nlohmann::json& context, const fs::path& dump_dir) {
  if (std::isfinite(value)) return;
  std::ostringstream msg;
  msg << what << " is not finite at step " << step;
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    const auto path = dump_dir / ("diagnostic_step_" + std::to_string(step) + ".json");
    nlohmann::json dump = context;
    dump["step"] = step;
    dump["failed"] = what;
    std::ofstream(path) << dump.dump(2) << "\n";
    msg << " (diagnostics: " << path.string() << ")";
  } else {
    msg << ": " << context.dump();
  }
  throw TrainingError(msg.str());
}

}  // namespace pose
