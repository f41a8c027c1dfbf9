#include "pose/baselines.hpp"

#include <iostream>
#include <stdexcept>

#include "pose/errors.hpp"
#include "pose/flow.hpp"
#include "pose/phase2.hpp"
#include "pose/rng.hpp"

namespace pose {

BaselineMethod parse_method(const std::string& tag) {
  if (tag == "lcm") return BaselineMethod::kLcm;
  if (tag == "add") return BaselineMethod::kAdd;
  if (tag == "dmd2") return BaselineMethod::kDmd2;
  throw ConfigError("unknown baseline method '" + tag + "' (expected lcm, add or dmd2)");
}

std::string method_tag(BaselineMethod method) {
  switch (method) {
    case BaselineMethod::kLcm:
      return "lcm";
    case BaselineMethod::kAdd:
      return "add";
    case BaselineMethod::kDmd2:
      return "dmd2";
  }
  return "lcm";
}

void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = nlohmann::json{{"method", method_tag(c.method)},
                     {"steps", c.steps},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"betas", c.betas},
                     {"ode_points", c.ode_points},
                     {"huber_c", c.huber_c},
                     {"target_decay", c.target_decay},
                     {"add_timesteps", c.add_timesteps},
                     {"student_ema", c.student_ema},
                     {"distill_weight", c.distill_weight},
                     {"disc_t_lo", c.disc_t_lo},
                     {"disc_t_hi", c.disc_t_hi},
                     {"head_lr", c.head_lr},
                     {"adv_betas", c.adv_betas},
                     {"adv_t", c.adv_t},
                     {"update_ratio", c.update_ratio},
                     {"adversarial", c.adversarial},
                     {"adv_weight", c.adv_weight},
                     {"priming", c.priming}};
}

void from_json(const nlohmann::json& j, BaselineConfig& c) {
  BaselineConfig d;
  c.method = parse_method(j.value("method", method_tag(d.method)));
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.betas = j.value("betas", d.betas);
  c.ode_points = j.value("ode_points", d.ode_points);
  c.huber_c = j.value("huber_c", d.huber_c);
  c.target_decay = j.value("target_decay", d.target_decay);
  c.add_timesteps = j.value("add_timesteps", d.add_timesteps);
  c.student_ema = j.value("student_ema", d.student_ema);
  c.distill_weight = j.value("distill_weight", d.distill_weight);
  c.disc_t_lo = j.value("disc_t_lo", d.disc_t_lo);
  c.disc_t_hi = j.value("disc_t_hi", d.disc_t_hi);
  c.head_lr = j.value("head_lr", d.head_lr);
  c.adv_betas = j.value("adv_betas", d.adv_betas);
  c.adv_t = j.value("adv_t", d.adv_t);
  c.update_ratio = j.value("update_ratio", d.update_ratio);
  c.adversarial = j.value("adversarial", d.adversarial);
  c.adv_weight = j.value("adv_weight", d.adv_weight);
  c.priming = j.value("priming", d.priming);
}

torch::Tensor pseudo_huber(const torch::Tensor& residual, double c) {
  if (c <= 0.0) throw std::invalid_argument("pseudo_huber: c must be positive");
  return ((residual.pow(2) + c * c).sqrt() - c).mean();
}

torch::Tensor consistency_function(VelocityNet& net, const torch::Tensor& x_t,
                                   const torch::Tensor& t, const Condition& cond) {
  return x_t - broadcast_level(t, x_t) * net->forward(x_t, t, cond);
}

namespace {

void log_progress(const RunOptions& options, const std::string& tag, int64_t step,
                  const nlohmann::json& row) {
  if (options.log_every > 0 && step % options.log_every == 0) {
    std::cout << "[" << tag << "] step " << step << " " << row.dump() << std::endl;
  }
}

void finish(const RunOptions& options, const VelocityNet& net, const std::string& tag,
            int64_t steps) {
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "generator", net, {"generator", tag, steps, options.seed});
  }
}

}  // namespace

VelocityNet train_lcm(const BaselineConfig& config, const VelocityNet& teacher,
                      const ClipBatch& dataset, const RunOptions& options) {
  if (!teacher) throw std::invalid_argument("lcm: missing teacher");
  if (config.ode_points < 1) throw ConfigError("lcm: ode_points must be >= 1");
  torch::manual_seed(options.seed);
  auto gen = make_generator(derive_seed(options.seed, 31));
  auto frozen = clone_net(teacher);
  set_requires_grad(*frozen, false);
  auto student = clone_net(teacher);
  set_requires_grad(*student, true);
  auto target = EmaBackbone::create(student, config.target_decay);
  auto opt = make_adam(student->parameters(), config.lr, config.betas);
  MetricsWriter metrics(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "metrics.jsonl");
  CheckpointKeeper keeper(options, "generator", "lcm");
  const double n_points = static_cast<double>(config.ode_points);

  for (int64_t step = 0; step < config.steps; ++step) {
    const auto batch = dataset.select(sample_indices(dataset.size(), config.batch, gen));
    const auto cond = batch.condition();
    const auto opts = batch.video.options();
    const auto n = torch::randint(1, config.ode_points + 1, {batch.size()}, gen,
                                  torch::TensorOptions().dtype(torch::kLong));
    const auto t_n = n.to(opts.dtype()) / n_points;
    const auto t_prev = (n - 1).to(opts.dtype()) / n_points;
    const auto eps = torch::randn(batch.video.sizes(), gen, opts);
    const auto x_n = interpolate(batch.video, eps, t_n);

    torch::Tensor target_out;
    {
      torch::NoGradGuard no_grad;
      // One teacher Euler step along the probability-flow ODE.
      const auto x_prev = x_n - broadcast_level(t_n - t_prev, x_n) * frozen->forward(x_n, t_n, cond);
      target_out = consistency_function(target.net, x_prev, t_prev, cond);
    }
    const auto loss = pseudo_huber(consistency_function(student, x_n, t_n, cond) - target_out, config.huber_c);
    nlohmann::json row{{"step", step}, {"lcm_loss", loss.item<double>()}};
    require_finite(loss.item<double>(), "lcm loss", step, row, options.out_dir);
    opt.zero_grad();
    loss.backward();
    opt.step();
    backbone_refresh(student, target);
    metrics.write(row);
    log_progress(options, "lcm", step + 1, row);
    keeper.maybe_save(student, step + 1);
  }
  finish(options, student, "lcm", config.steps);
  return student;
}

VelocityNet train_add(const BaselineConfig& config, const VelocityNet& teacher,
                      const ClipBatch& dataset, const RunOptions& options) {
  if (!teacher) throw std::invalid_argument("add: missing teacher");
  if (config.add_timesteps.empty()) throw ConfigError("add: empty timestep set");
  torch::manual_seed(options.seed);
  auto gen = make_generator(derive_seed(options.seed, 41));
  auto frozen = clone_net(teacher);
  set_requires_grad(*frozen, false);
  auto student = clone_net(teacher);
  set_requires_grad(*student, true);
  auto ema = EmaBackbone::create(student, config.student_ema);
  auto head = std::make_shared<ConvHead>(HeadConfig::from_net(teacher->config(), 1));
  head->to(teacher->embed->weight.scalar_type());
  auto student_opt = make_adam(student->parameters(), config.lr, config.adv_betas);
  auto head_opt = make_adam(head->parameters(), config.head_lr, config.adv_betas);
  const auto levels = torch::tensor(config.add_timesteps, torch::kDouble);
  MetricsWriter metrics(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "metrics.jsonl");
  CheckpointKeeper keeper(options, "generator", "add");

  for (int64_t step = 0; step < config.steps; ++step) {
    const auto batch = dataset.select(sample_indices(dataset.size(), config.batch, gen));
    const auto cond = batch.condition();
    const auto opts = batch.video.options();
    const int64_t B = batch.size();
    const auto shape = batch.video.sizes();
    const auto pick = torch::randint(0, levels.size(0), {B}, gen, torch::TensorOptions().dtype(torch::kLong));
    const auto s = levels.index_select(0, pick).to(opts.dtype());
    const auto x_s = interpolate(batch.video, torch::randn(shape, gen, opts), s);
    const auto x0 = consistency_function(student, x_s, s, cond);

    // The discriminator sees re-noised clips through the frozen teacher.
    const auto t = sample_levels(B, config.disc_t_lo, config.disc_t_hi, gen);
    const auto eps_real = torch::randn(shape, gen, opts);
    const auto eps_fake = torch::randn(shape, gen, opts);
    const auto real_t = interpolate(batch.video, eps_real, t);
    auto loss_d = adversarial_losses(discriminator_forward(frozen, *head, real_t, t, cond),
                                     discriminator_forward(frozen, *head, interpolate(x0.detach(), eps_fake, t), t, cond))
                      .discriminator;
    head_opt.zero_grad();
    loss_d.backward();
    head_opt.step();

    const auto logits_fake = discriminator_forward(frozen, *head, interpolate(x0, eps_fake, t), t, cond);
    const auto adv_g = -logits_fake.mean();
    const auto distill = frame_consistency_loss(x0, as_field(frozen), t, eps_fake, cond);
    const auto loss_g = adv_g + config.distill_weight * distill;
    nlohmann::json row{{"step", step},
                       {"adv_d", loss_d.item<double>()},
                       {"adv_g", adv_g.item<double>()},
                       {"distill", distill.item<double>()}};
    require_finite(loss_g.item<double>(), "add generator loss", step, row, options.out_dir);
    student_opt.zero_grad();
    loss_g.backward();
    student_opt.step();
    backbone_refresh(student, ema);

    metrics.write(row);
    log_progress(options, "add", step + 1, row);
    keeper.maybe_save(ema.net, step + 1);
  }
  finish(options, ema.net, "add", config.steps);
  return ema.net;
}

namespace {

// Discriminator on the fake model's features at a single high-SNR level.
class Dmd2Adversary : public PrimingAdversary {
 public:
  Dmd2Adversary(const BaselineConfig& config, VelocityNet fake)
      : config_(config), fake_(std::move(fake)) {
    head_ = std::make_shared<ConvHead>(HeadConfig::from_net(fake_->config(), 1));
    head_->to(fake_->embed->weight.scalar_type());
    opt_ = std::make_unique<torch::optim::Adam>(make_adam(head_->parameters(), config.head_lr, config.adv_betas));
  }

  torch::Tensor generator_loss(const torch::Tensor& x0, const Condition& cond,
                               torch::Generator& gen) override {
    const auto t = level(x0);
    const auto x_t = interpolate(x0, torch::randn(x0.sizes(), gen, x0.options()), t);
    return config_.adv_weight * -discriminator_forward(fake_, *head_, x_t, t, cond).mean();
  }

  double discriminator_step(const torch::Tensor& x0_detached, const ClipBatch& real,
                            torch::Generator& gen) override {
    const auto cond = real.condition();
    const auto t = level(x0_detached);
    const auto real_t = interpolate(real.video, torch::randn(real.video.sizes(), gen, real.video.options()), t);
    const auto fake_t = interpolate(x0_detached, torch::randn(x0_detached.sizes(), gen, x0_detached.options()), t);
    const auto loss = adversarial_losses(discriminator_forward(fake_, *head_, real_t, t, cond),
                                         discriminator_forward(fake_, *head_, fake_t, t, cond))
                          .discriminator;
    opt_->zero_grad();
    loss.backward();
    opt_->step();
    return loss.item<double>();
  }

 private:
  torch::Tensor level(const torch::Tensor& x) const {
    return torch::full({x.size(0)}, config_.adv_t, x.options());
  }

  BaselineConfig config_;
  VelocityNet fake_;
  std::shared_ptr<ConvHead> head_;
  std::unique_ptr<torch::optim::Adam> opt_;
};

}  // namespace

Phase1Config dmd2_priming_config(const BaselineConfig& config) {
  auto p = config.priming;
  p.steps = config.steps;
  p.batch = config.batch;
  p.lr = config.lr;
  p.fake_updates = config.update_ratio;
  return p;
}

VelocityNet train_dmd2(const BaselineConfig& config, const VelocityNet& teacher,
                       const ClipBatch& dataset, const RunOptions& options) {
  AdversaryFactory factory;
  if (config.adversarial) {
    factory = [&config](PrimingState& state) -> std::unique_ptr<PrimingAdversary> {
      return std::make_unique<Dmd2Adversary>(config, state.fake);
    };
  }
  return run_priming(dmd2_priming_config(config), teacher, dataset, options, factory, "dmd2");
}

VelocityNet train_baseline(const BaselineConfig& config, const VelocityNet& teacher,
                           const ClipBatch& dataset, const RunOptions& options) {
  switch (config.method) {
    case BaselineMethod::kLcm:
      return train_lcm(config, teacher, dataset, options);
    case BaselineMethod::kAdd:
      return train_add(config, teacher, dataset, options);
    case BaselineMethod::kDmd2:
      return train_dmd2(config, teacher, dataset, options);
  }
  throw ConfigError("unknown baseline method");
}

}  // namespace pose
