#pragma once

// Synthetic conditional "video" data: toroidal moving blobs rendered with
// bilinear splatting, analytic Gaussian-mixture toys, and the structured
// perturbations used by the spatiotemporal R1 penalty.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "pose/flow.hpp"

namespace pose {

struct SceneAttributes {
  int shape_class = 0;
  std::array<double, 2> direction{1.0, 0.0};  // unit (dx, dy)
  double speed = 0.0;                         // pixels per frame
  int color = 0;
  std::array<double, 2> origin{0.0, 0.0};     // blob centre in frame 0, (x, y)
};

enum class MaskMode { kFirstFrame, kFirstAndLast };

struct DataConfig {
  int64_t frames = 8;
  int64_t channels = 1;
  int64_t height = 16;
  int64_t width = 16;
  int64_t shape_classes = 4;
  int64_t colors = 2;
  int64_t directions = 8;
  std::vector<double> speeds{1.0, 2.0};
  int64_t blob_radius = 1;  // stamp is (2r+1) x (2r+1)
  double background = -1.0;
  MaskMode mask_mode = MaskMode::kFirstFrame;
  int64_t train_clips = 2048;
  int64_t test_clips = 256;
  // Fraction of the distillation "real" set replaced by teacher samples.
  double teacher_mix = 0.5;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);

// A batch of clips that share a conditioning mask.
struct ClipBatch {
  torch::Tensor video;            // (B, F, C, H, W) in [-1, 1]
  torch::Tensor condition_frame;  // (B, C, H, W) == video[:, 0]
  torch::Tensor mask;             // (F) float
  std::vector<SceneAttributes> attributes;

  int64_t size() const { return video.defined() ? video.size(0) : 0; }
  Condition condition() const;
  ClipBatch select(const torch::Tensor& index) const;
  ClipBatch slice(int64_t begin, int64_t end) const;
};

// Builds the model-facing conditioning tensor for a video and mask.
torch::Tensor conditioning_frames(const torch::Tensor& video, const torch::Tensor& mask);
torch::Tensor make_mask(int64_t frames, MaskMode mode);

// Renders `count` clips; a pure function of (config, count, seed).
ClipBatch make_moving_blob(const DataConfig& config, int64_t count, uint64_t seed);

// Renders a single clip from explicit attributes, shape (F, C, H, W).
torch::Tensor render_clip(const DataConfig& config, const SceneAttributes& attrs);

// Uniform random minibatch indices.
torch::Tensor sample_indices(int64_t population, int64_t batch, torch::Generator& gen);

// Isotropic Gaussian mixture in `dims` dimensions with analytic score and
// analytic flow-matching quantities for the noised marginals.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<std::vector<double>> means,
                  std::vector<double> variances);

  int64_t dims() const { return dims_; }
  size_t components() const { return weights_.size(); }

  // (n, dims) float64 samples.
  torch::Tensor sample(int64_t n, uint64_t seed) const;
  // Marginal of x_t = (1 - t) x0 + t eps.
  GaussianMixture noised(double t) const;
  torch::Tensor log_density(const torch::Tensor& x) const;
  torch::Tensor score(const torch::Tensor& x) const;
  // Optimal velocity E[eps - x0 | x_t] at level t.
  torch::Tensor optimal_velocity(const torch::Tensor& x_t, double t) const;
  torch::Tensor mean() const;

 private:
  std::vector<double> weights_;
  std::vector<std::vector<double>> means_;
  std::vector<double> variances_;
  int64_t dims_ = 0;
};

GaussianMixture make_gaussian_toy(int64_t dims, const std::vector<double>& weights,
                                  const std::vector<std::vector<double>>& means,
                                  const std::vector<double>& variances);

struct PerturbationSpec {
  double sigma_s = 0.01;
  double sigma_t = 0.01;
  double t_jitter = 0.01;

  bool is_zero() const { return sigma_s == 0.0 && sigma_t == 0.0 && t_jitter == 0.0; }
};

void to_json(nlohmann::json& j, const PerturbationSpec& s);
void from_json(const nlohmann::json& j, PerturbationSpec& s);

struct Perturbation {
  torch::Tensor x_pert;
  torch::Tensor t_pert;  // same shape as the input level tensor
  torch::Tensor eps_s;   // i.i.d. per element
  torch::Tensor eps_t;   // constant within each frame
};

// x_pert = x + eps_s + eps_t on a (B, F, ...) tensor; t jittered and clamped
// into (0, 1].
Perturbation perturb_spatiotemporal(const torch::Tensor& x, const PerturbationSpec& spec,
                                    const torch::Tensor& t, uint64_t seed);

// Directory layout: video.pt + manifest.json.
void save_dataset(const std::filesystem::path& dir, const ClipBatch& clips,
                  const DataConfig& config, uint64_t seed, const std::string& split);
ClipBatch load_dataset(const std::filesystem::path& dir);

}  // namespace pose
