#include "pose/flow.hpp"

#include <stdexcept>
#include <string>

namespace pose {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

void require_positive(const torch::Tensor& t, const char* what) {
  if (t.le(0).any().item<bool>()) {
    throw std::domain_error(std::string(what) + ": noise level must be > 0");
  }
}

}  // namespace

Condition Condition::select(const torch::Tensor& index) const {
  Condition out;
  out.frames = frames.index_select(0, index);
  out.mask = mask;
  out.attrs = attrs.index_select(0, index);
  return out;
}

Condition Condition::to(torch::Dtype dtype) const {
  Condition out = *this;
  out.frames = frames.to(dtype);
  out.mask = mask.to(dtype);
  return out;
}

torch::Tensor broadcast_level(const torch::Tensor& t, const torch::Tensor& like) {
  if (t.dim() == 0) {
    return t.to(like.dtype());
  }
  if (t.dim() != 1 || t.size(0) != like.size(0)) {
    throw std::invalid_argument("noise level must be a scalar or a (B) tensor matching the batch");
  }
  std::vector<int64_t> shape(static_cast<size_t>(like.dim()), 1);
  shape[0] = like.size(0);
  return t.to(like.dtype()).reshape(shape);
}

torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, const torch::Tensor& t) {
  require_same_shape(x0, eps, "interpolate");
  const auto tb = broadcast_level(t, x0);
  return (1 - tb) * x0 + tb * eps;
}

torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& eps, double t) {
  if (t < 0.0 || t > 1.0) {
    throw std::domain_error("interpolate: t outside [0, 1]");
  }
  return interpolate(x0, eps, torch::scalar_tensor(t, x0.options()));
}

torch::Tensor velocity_target(const torch::Tensor& x0, const torch::Tensor& eps) {
  require_same_shape(x0, eps, "velocity_target");
  return eps - x0;
}

torch::Tensor diffusion_loss(const VelocityField& model, const torch::Tensor& x0,
                             const torch::Tensor& eps, const torch::Tensor& t,
                             const Condition& cond) {
  const auto x_t = interpolate(x0, eps, t);
  const auto target = velocity_target(x0, eps);
  const auto pred = model(x_t, t, cond);
  require_same_shape(pred, target, "diffusion_loss");
  return (target - pred).pow(2).mean();
}

torch::Tensor score_from_velocity(const torch::Tensor& x_t, const torch::Tensor& mu_out,
                                  const torch::Tensor& t) {
  require_same_shape(x_t, mu_out, "score_from_velocity");
  require_positive(t, "score_from_velocity");
  const auto tb = broadcast_level(t, x_t);
  return -(x_t + (1 - tb) * mu_out) / tb;
}

torch::Tensor score_from_velocity(const torch::Tensor& x_t, const torch::Tensor& mu_out, double t) {
  return score_from_velocity(x_t, mu_out, torch::scalar_tensor(t, x_t.options()));
}

double shift_level(double t, double shift) {
  return shift * t / (1.0 + (shift - 1.0) * t);
}

SampleResult euler_sample(const VelocityField& model, const torch::Tensor& x_T, int64_t steps,
                          const Condition& cond, const EulerOptions& options) {
  if (steps < 1) {
    throw std::invalid_argument("euler_sample: steps must be >= 1");
  }
  const int64_t batch = x_T.size(0);
  auto x = x_T;
  for (int64_t i = 0; i < steps; ++i) {
    const double t_hi = shift_level(1.0 - static_cast<double>(i) / steps, options.flow_shift);
    const double t_lo = shift_level(1.0 - static_cast<double>(i + 1) / steps, options.flow_shift);
    const auto levels = full_levels(batch, t_hi, x.scalar_type());
    x = x - (t_hi - t_lo) * model(x, levels, cond);
  }
  return {x, steps};
}

torch::Tensor one_step_denoise(const VelocityField& model, const torch::Tensor& x_t,
                               const torch::Tensor& t, const Condition& cond) {
  const auto tb = broadcast_level(t, x_t);
  if (t.le(0).all().item<bool>()) {
    return x_t;
  }
  const auto out = x_t - tb * model(x_t, t, cond);
  // Samples already at t = 0 are clean; keep them untouched.
  return torch::where(tb.le(0), x_t, out);
}

torch::Tensor one_step_denoise(const VelocityField& model, const torch::Tensor& x_t, double t,
                               const Condition& cond) {
  return one_step_denoise(model, x_t, full_levels(x_t.size(0), t, x_t.scalar_type()), cond);
}

torch::Tensor sample_levels(int64_t batch, double lo, double hi, torch::Generator& gen,
                            torch::Dtype dtype) {
  if (!(lo <= hi) || lo < 0.0 || hi > 1.0) {
    throw std::invalid_argument("sample_levels: need 0 <= lo <= hi <= 1");
  }
  auto u = torch::rand({batch}, gen, torch::TensorOptions().dtype(torch::kFloat64));
  return (lo + (hi - lo) * u).to(dtype);
}

torch::Tensor full_levels(int64_t batch, double t, torch::Dtype dtype) {
  return torch::full({batch}, t, torch::TensorOptions().dtype(dtype));
}

}  // namespace pose
