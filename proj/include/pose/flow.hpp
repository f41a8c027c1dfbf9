#pragma once

// Linear-interpolation flow matching: x_t = (1 - t) x0 + t eps, t = 1 is pure
// noise. All functions are dtype generic and accept a noise level either as a
// 0-dim tensor (shared by the batch) or as a (B) tensor (one level per sample).

#include <torch/torch.h>

#include <functional>
#include <vector>

namespace pose {

// Conditioning signal shared by every velocity predictor.
struct Condition {
  torch::Tensor frames;  // (B, F, C, H, W): conditional frames, first frame replicated elsewhere
  torch::Tensor mask;    // (F) float, 1 marks a conditional frame
  torch::Tensor attrs;   // (B, 2) int64: shape class, color id

  int64_t batch() const { return frames.defined() ? frames.size(0) : 0; }
  Condition select(const torch::Tensor& index) const;
  Condition to(torch::Dtype dtype) const;
};

// mu(x_t, t, condition) -> tensor with the shape of x_t.
using VelocityField =
    std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const Condition&)>;

// Reshapes a 0-dim or (B) level tensor so it broadcasts against `like`.
torch::Tensor broadcast_level(const torch::Tensor& t, const torch::Tensor& like);

torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, const torch::Tensor& t);
torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, double t);

// d x_t / dt along the straight path.
torch::Tensor velocity_target(const torch::Tensor& x0, const torch::Tensor& eps);

// Mean over batch and elements of |(eps - x0) - mu(x_t, t)|^2.
torch::Tensor diffusion_loss(const VelocityField& model, const torch::Tensor& x0,
                             const torch::Tensor& eps, const torch::Tensor& t,
                             const Condition& cond);

// s = -(x_t + (1 - t) mu) / t. Throws std::domain_error when any t <= 0.
torch::Tensor score_from_velocity(const torch::Tensor& x_t, const torch::Tensor& mu_out,
                                  const torch::Tensor& t);
torch::Tensor score_from_velocity(const torch::Tensor& x_t, const torch::Tensor& mu_out, double t);

// Maps a uniform grid point to the shifted schedule shift*t / (1 + (shift-1) t).
// shift == 1 is the identity.
double shift_level(double t, double shift);

struct EulerOptions {
  double flow_shift = 1.0;
};

struct SampleResult {
  torch::Tensor x;
  int64_t nfe = 0;
};

// Integrates dx/dt = mu from t = 1 down to t = 0 in `steps` uniform steps.
SampleResult euler_sample(const VelocityField& model, const torch::Tensor& x_T, int64_t steps,
                          const Condition& cond, const EulerOptions& options = {});

// x_t - t mu(x_t, t). Levels equal to zero return x_t for that sample.
torch::Tensor one_step_denoise(const VelocityField& model, const torch::Tensor& x_t,
                               const torch::Tensor& t, const Condition& cond);
torch::Tensor one_step_denoise(const VelocityField& model, const torch::Tensor& x_t, double t,
                               const Condition& cond);

// (B) levels drawn uniformly from [lo, hi].
torch::Tensor sample_levels(int64_t batch, double lo, double hi, torch::Generator& gen,
                            torch::Dtype dtype = torch::kFloat32);

// Constant level tensor of shape (B).
torch::Tensor full_levels(int64_t batch, double t, torch::Dtype dtype = torch::kFloat32);

}  // namespace pose
