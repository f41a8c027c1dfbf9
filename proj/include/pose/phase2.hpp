#pragma once

// Unified adversarial equilibrium: the discriminator backbone is an EMA shadow
// of the generator itself, paired with a trainable head; the discriminator is
// regularised by a spatiotemporal finite-perturbation R1 penalty and the
// generator by a frame consistency loss against the real model.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "pose/data.hpp"
#include "pose/flow.hpp"
#include "pose/nets.hpp"
#include "pose/train_common.hpp"

namespace pose {

enum class AdversarialForm { kHinge, kNonSaturating };
enum class R1Mode { kSecondOrder, kDetached };
enum class HeadKind { kSemantic, kConv };

struct Phase2Config {
  int64_t steps = 1000;
  int64_t batch = 32;
  double lr = 2e-6;
  double head_lr = 2e-6;
  std::array<double, 2> betas{0.5, 0.999};
  double lambda = 10.0;
  double eta = 1.0;
  double adv_weight = 1.0;
  double ema_decay = 0.995;
  double t_lo = 0.6;
  double t_hi = 0.98;
  // Level range for the frame-consistency re-noising; unset shares the
  // adversarial draw (same t and noise).
  std::optional<std::array<double, 2>> consist_t;
  AdversarialForm loss = AdversarialForm::kHinge;
  R1Mode r1 = R1Mode::kSecondOrder;
  bool r1_on_fake = false;
  PerturbationSpec perturbation{};
  HeadKind head = HeadKind::kSemantic;
  int64_t head_queries = 16;
  double divergence_threshold = 1e3;
  int64_t divergence_patience = 50;
};

void to_json(nlohmann::json& j, const Phase2Config& c);
void from_json(const nlohmann::json& j, Phase2Config& c);

struct AdversarialLosses {
  torch::Tensor generator;
  torch::Tensor discriminator;
};

// Hinge: L_D = mean(relu(1 - D(real))) + mean(relu(1 + D(fake))), L_G = -mean(D(fake)).
// Non-saturating: L_D = mean(softplus(-D(real))) + mean(softplus(D(fake))),
// L_G = mean(softplus(-D(fake))).
AdversarialLosses adversarial_losses(const torch::Tensor& real_logits,
                                     const torch::Tensor& fake_logits,
                                     AdversarialForm form = AdversarialForm::kHinge);

// Discriminator as a function of (x, t) with the condition bound. Returns (B).
using DiscriminatorFn = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

// mean_b |grad D(x_pert, t_pert) - grad D(x, t)|^2 / |eps_s + eps_t|^2.
// Throws std::invalid_argument when the perturbation is zero for any sample.
torch::Tensor st_r1_penalty(const DiscriminatorFn& disc, const torch::Tensor& x,
                            const torch::Tensor& t, const PerturbationSpec& spec, uint64_t seed,
                            R1Mode mode = R1Mode::kSecondOrder);

// mean |x0 - sg(x_hat)|^2 with x_hat the real model's one-step denoising of
// the stop-gradient noised sample.
torch::Tensor frame_consistency_loss(const torch::Tensor& x0_gen, const VelocityField& mu_real,
                                     const torch::Tensor& t, const torch::Tensor& eps,
                                     const Condition& cond);

struct EquilibriumState {
  Phase2Config config;
  VelocityNet generator{nullptr};
  VelocityNet teacher{nullptr};
  std::unique_ptr<EmaBackbone> backbone;
  std::shared_ptr<DiscriminatorHead> head;
  std::unique_ptr<torch::optim::Adam> generator_opt;
  std::unique_ptr<torch::optim::Adam> head_opt;
  int64_t step = 0;
  int64_t divergent_steps = 0;
  std::filesystem::path dump_dir;
};

EquilibriumState make_equilibrium_state(const Phase2Config& config, const VelocityNet& init,
                                        const VelocityNet& teacher);

struct EquilibriumMetrics {
  int64_t step = 0;
  double adv_g = 0.0;
  double adv_d = 0.0;
  double st_r1 = 0.0;
  double consist = 0.0;
  double logit_real_mean = 0.0;
  double logit_fake_mean = 0.0;

  nlohmann::json to_json() const;
};

// Hooks for tests to observe the state between the discriminator and
// generator updates.
struct StepProbe {
  std::function<void(const EquilibriumState&)> after_discriminator;
  std::function<void(const EquilibriumState&)> after_generator;
};

EquilibriumMetrics equilibrium_step(EquilibriumState& state, const ClipBatch& real,
                                    torch::Generator& gen, const StepProbe* probe = nullptr);

// Runs the whole phase from `init` (a phase1 generator or the teacher).
VelocityNet run_phase2(const Phase2Config& config, const VelocityNet& init,
                       const VelocityNet& teacher, const ClipBatch& dataset,
                       const RunOptions& options);

}  // namespace pose
