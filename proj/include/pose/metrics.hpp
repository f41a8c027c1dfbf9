#pragma once

// Desk-scale evaluation: distribution distances on flattened clips and on a
// seeded random feature map, temporal statistics, conditioning fidelity,
// NFE/latency accounting and a frozen composite score.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <optional>
#include <vector>

#include "pose/data.hpp"
#include "pose/flow.hpp"
#include "pose/nets.hpp"

namespace pose {

// Mean over random unit directions of the 1-D Wasserstein-1 distance between
// the projected empirical distributions. Rows are samples; trailing dims are
// flattened. Set sizes may differ.
double sliced_wasserstein(const torch::Tensor& a, const torch::Tensor& b, int64_t n_projections,
                          uint64_t seed);

// W1 between two 1-D empirical distributions (quantile-function integral).
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

// Squared MMD with k(x, y) = exp(-|x - y|^2 / h). h <= 0 selects the median of
// pooled pairwise squared distances.
double mmd_rbf(const torch::Tensor& a, const torch::Tensor& b, bool unbiased = false,
               double bandwidth = 0.0);

// tanh(x W) with W ~ N(0, 1/D) fixed by the seed.
class RandomFeatureMap {
 public:
  RandomFeatureMap(int64_t input_dim, int64_t output_dim, uint64_t seed);
  torch::Tensor operator()(const torch::Tensor& x) const;
  int64_t input_dim() const { return weight_.size(0); }

 private:
  torch::Tensor weight_;
};

struct TemporalMetrics {
  double motion_smoothness = 0.0;    // mean squared second difference
  double subject_consistency = 0.0;  // mean adjacent-frame Pearson correlation
  double dynamic_degree = 0.0;       // mean squared first difference
};

// videos: (B, F, ...) with F >= 3.
TemporalMetrics temporal_metrics(const torch::Tensor& videos);

// Mean squared error between frame 0 of each clip and its condition frame.
// conditions: (B, C, H, W) or (B, F, C, H, W) (frame 0 is used).
double condition_fidelity(const torch::Tensor& videos, const torch::Tensor& conditions);

// Guided sampling costs two evaluations per step.
int64_t reported_nfe(int64_t steps, bool guided);

struct LatencyRow {
  int64_t steps = 0;
  int64_t nfe = 0;
  double wall_time_s = 0.0;
};

// Median wall time of `repeats` timed euler_sample runs per step count.
std::vector<LatencyRow> latency_report(const VelocityField& model, const torch::Tensor& x_T,
                                       const Condition& cond, const std::vector<int64_t>& steps,
                                       bool guided = false, int repeats = 3);

struct EvalReport {
  std::optional<double> sliced_wasserstein;
  std::optional<double> mmd_rbf;
  std::optional<double> feature_sw;
  std::optional<double> feature_mmd;
  std::optional<double> motion_smoothness;
  std::optional<double> subject_consistency;
  std::optional<double> condition_mse;
  std::optional<double> dynamic_degree;
  int64_t nfe = 0;
  double wall_time_s = 0.0;
  std::optional<double> composite;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

struct CompositeWeights {
  double sw = 0.4;
  double consistency = 0.2;
  double smoothness = 0.2;
  double condition = 0.2;
};

void to_json(nlohmann::json& j, const CompositeWeights& w);
void from_json(const nlohmann::json& j, CompositeWeights& w);

// Normalisers taken from the teacher's many-step report; floored at 1e-8.
struct CompositeReference {
  double sw = 1.0;
  double smoothness = 1.0;
  double condition_mse = 1.0;

  static CompositeReference from_report(const EvalReport& teacher);
};

void to_json(nlohmann::json& j, const CompositeReference& r);
void from_json(const nlohmann::json& j, CompositeReference& r);

// w_sw (1 - sw/ref) + w_c consistency + w_s (1 - smooth/ref) + w_m (1 - mse/ref).
// Throws EvaluationError when a component is missing or not finite.
double composite_score(const EvalReport& report, const CompositeReference& ref,
                       const CompositeWeights& weights = {});

struct EvalOptions {
  int64_t n_projections = 128;
  int64_t feature_dim = 128;
  uint64_t projection_seed = 7;
  uint64_t noise_seed = 13;
  int64_t batch = 64;
  bool guided = false;
};

void to_json(nlohmann::json& j, const EvalOptions& o);
void from_json(const nlohmann::json& j, EvalOptions& o);

struct Evaluation {
  EvalReport report;
  torch::Tensor samples;  // (N, F, C, H, W)
};

// Samples one clip per test condition with `steps` Euler steps from fixed
// noise and scores it against the test clips.
Evaluation evaluate(const VelocityNet& model, const ClipBatch& test, int64_t steps,
                    const EvalOptions& options = {});

// Scores pre-generated samples against reference clips.
EvalReport score_samples(const torch::Tensor& samples, const ClipBatch& reference,
                         const EvalOptions& options);

}  // namespace pose
