#pragma once

// Stability priming: distribution-matching updates of the one-step generator
// against a frozen real model and a LoRA fake model that is refit to the
// generator's current outputs.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <functional>
#include <memory>
#include <string>

#include "pose/data.hpp"
#include "pose/flow.hpp"
#include "pose/nets.hpp"
#include "pose/train_common.hpp"

namespace pose {

struct Phase1Config {
  int64_t steps = 500;
  int64_t batch = 32;
  double lr = 1e-6;
  double fake_lr = 1e-6;
  std::array<double, 2> betas{0.9, 0.999};
  int64_t fake_updates = 5;
  int64_t lora_rank = 4;
  double lora_alpha = 4.0;
  double t_lo = 0.02;
  double t_hi = 0.98;
  bool normalize = true;
  // High-to-low SNR curriculum: t_hi ramps from curriculum_start to t_hi.
  bool curriculum = true;
  double curriculum_start = 0.6;
  int64_t curriculum_steps = 250;
  double dmd_weight = 1.0;
};

void to_json(nlohmann::json& j, const Phase1Config& c);
void from_json(const nlohmann::json& j, Phase1Config& c);

// g = -(s_real - s_fake) at x_t = interpolate(x0_gen, eps, t); optionally
// divided per sample by mean|g| + 1e-8. Computed without a tape.
torch::Tensor dmd_gradient(const torch::Tensor& x0_gen, const VelocityField& mu_real,
                           const VelocityField& mu_fake, const torch::Tensor& t,
                           const torch::Tensor& eps, const Condition& cond, bool normalize);

// 0.5 * mean((x0 - sg(x0 - g))^2): its gradient w.r.t. x0 is g / N.
torch::Tensor dmd_surrogate_loss(const torch::Tensor& x0_gen, const torch::Tensor& grad);

// Flow-matching loss of the fake model on detached generator samples.
torch::Tensor fake_model_loss(const VelocityField& mu_fake, const torch::Tensor& x0_gen,
                              const torch::Tensor& eps, const torch::Tensor& t,
                              const Condition& cond);

// Optional extra adversarial term; used by the DMD2 baseline.
class PrimingAdversary {
 public:
  virtual ~PrimingAdversary() = default;
  // Added to the generator loss.
  virtual torch::Tensor generator_loss(const torch::Tensor& x0, const Condition& cond,
                                       torch::Generator& gen) = 0;
  // One discriminator update; returns its loss.
  virtual double discriminator_step(const torch::Tensor& x0_detached, const ClipBatch& real,
                                    torch::Generator& gen) = 0;
};

struct PrimingState {
  Phase1Config config;
  VelocityNet generator{nullptr};
  VelocityNet teacher{nullptr};
  VelocityNet fake{nullptr};
  std::unique_ptr<torch::optim::Adam> generator_opt;
  std::unique_ptr<torch::optim::Adam> fake_opt;
  int64_t step = 0;
  std::filesystem::path dump_dir;
};

// Generator and fake model both start from the teacher; the teacher is frozen.
PrimingState make_priming_state(const Phase1Config& config, const VelocityNet& teacher);

struct PrimingMetrics {
  int64_t step = 0;
  double dmd_loss = 0.0;
  double fake_loss = 0.0;
  double grad_norm = 0.0;
  double t_hi = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;

  nlohmann::json to_json() const;
};

double curriculum_t_hi(const Phase1Config& config, int64_t step);

// One generator update at t = 1 followed by `fake_updates` fake-model updates.
PrimingMetrics priming_step(PrimingState& state, const ClipBatch& batch, torch::Generator& gen,
                            PrimingAdversary* adversary = nullptr);

using AdversaryFactory = std::function<std::unique_ptr<PrimingAdversary>(PrimingState&)>;

// The priming loop with an optional adversary; `tag` names logs and checkpoints.
VelocityNet run_priming(const Phase1Config& config, const VelocityNet& teacher,
                        const ClipBatch& dataset, const RunOptions& options,
                        const AdversaryFactory& make_adversary, const std::string& tag);

// Runs the whole phase; writes <out>/generator.{pt,json} and <out>/metrics.jsonl.
VelocityNet run_phase1(const Phase1Config& config, const VelocityNet& teacher,
                       const ClipBatch& dataset, const RunOptions& options);

}  // namespace pose
