#pragma once

// Plumbing shared by every trainer: run options, JSON-lines metric logs,
// checkpoint retention and finite-value guards.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pose/nets.hpp"

namespace pose {

// Scores a generator snapshot; lower is better (e.g. 1-NFE sliced Wasserstein).
using SnapshotScorer = std::function<double(const VelocityNet&)>;

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no files written
  uint64_t seed = 0;
  int64_t checkpoint_every = 100;
  int64_t keep_last = 2;
  int64_t log_every = 0;  // 0: silent
  SnapshotScorer scorer;  // optional best-by-score retention
};

class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const nlohmann::json& row);
  bool enabled() const { return out_ != nullptr; }

 private:
  std::unique_ptr<std::ofstream> out_;
};

std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path);

// Periodic checkpoints under <out>/checkpoints: keeps the last N plus the best
// scoring snapshot when a scorer is configured.
class CheckpointKeeper {
 public:
  CheckpointKeeper(const RunOptions& options, std::string role, std::string tag);
  void maybe_save(const VelocityNet& net, int64_t step);
  std::optional<std::filesystem::path> best() const { return best_; }

 private:
  RunOptions options_;
  std::string role_;
  std::string tag_;
  std::vector<std::filesystem::path> recent_;
  std::optional<std::filesystem::path> best_;
  double best_score_ = 0.0;
};

torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, double lr,
                             const std::array<double, 2>& betas);

double grad_norm(const std::vector<torch::Tensor>& params);

// Throws TrainingError naming `what` and dumping `context` when value is not finite.
void require_finite(double value, const std::string& what, int64_t step,
                    const nlohmann::json& context, const std::filesystem::path& dump_dir);


}  // namespace pose
