#pragma once

// Comparison distillers: consistency distillation (LCM), multi-point
// adversarial distillation (ADD) and DMD with an adversarial term (DMD2).

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <string>
#include <vector>

#include "pose/data.hpp"
#include "pose/nets.hpp"
#include "pose/phase1.hpp"
#include "pose/train_common.hpp"

namespace pose {

enum class BaselineMethod { kLcm, kAdd, kDmd2 };

BaselineMethod parse_method(const std::string& tag);  // throws ConfigError on unknown tags
std::string method_tag(BaselineMethod method);

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::kLcm;
  int64_t steps = 1000;
  int64_t batch = 32;
  double lr = 2e-6;
  std::array<double, 2> betas{0.9, 0.999};

  // lcm
  int64_t ode_points = 64;
  double huber_c = 0.001;
  double target_decay = 0.95;

  // add
  std::vector<double> add_timesteps{0.25, 0.5, 0.75, 1.0};
  double student_ema = 0.995;
  double distill_weight = 2.5;
  double disc_t_lo = 0.1;
  double disc_t_hi = 0.9;
  double head_lr = 2e-6;
  std::array<double, 2> adv_betas{0.5, 0.999};

  // dmd2
  double adv_t = 0.4;
  int64_t update_ratio = 5;
  bool adversarial = true;
  double adv_weight = 1.0;
  Phase1Config priming{};  // DMD machinery; steps/batch/lr/ratio come from above
};

void to_json(nlohmann::json& j, const BaselineConfig& c);
void from_json(const nlohmann::json& j, BaselineConfig& c);

// sqrt(r^2 + c^2) - c per element, averaged.
torch::Tensor pseudo_huber(const torch::Tensor& residual, double c);

// Consistency function f(x_t, t) = x_t - t * mu(x_t, t); identity at t = 0.
torch::Tensor consistency_function(VelocityNet& net, const torch::Tensor& x_t,
                                   const torch::Tensor& t, const Condition& cond);

VelocityNet train_lcm(const BaselineConfig& config, const VelocityNet& teacher,
                      const ClipBatch& dataset, const RunOptions& options);

VelocityNet train_add(const BaselineConfig& config, const VelocityNet& teacher,
                      const ClipBatch& dataset, const RunOptions& options);

// The Phase I configuration DMD2 runs its distribution-matching part with.
Phase1Config dmd2_priming_config(const BaselineConfig& config);

VelocityNet train_dmd2(const BaselineConfig& config, const VelocityNet& teacher,
                       const ClipBatch& dataset, const RunOptions& options);

VelocityNet train_baseline(const BaselineConfig& config, const VelocityNet& teacher,
                           const ClipBatch& dataset, const RunOptions& options);

}  // namespace pose
