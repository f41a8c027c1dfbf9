#include "pose/phase1.hpp"

#include <algorithm>
#include <iostream>
#include <stdexcept>

#include "pose/rng.hpp"

namespace pose {

void to_json(nlohmann::json& j, const Phase1Config& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"fake_lr", c.fake_lr},
                     {"betas", c.betas},
                     {"fake_updates", c.fake_updates},
                     {"lora_rank", c.lora_rank},
                     {"lora_alpha", c.lora_alpha},
                     {"t_lo", c.t_lo},
                     {"t_hi", c.t_hi},
                     {"normalize", c.normalize},
                     {"curriculum", c.curriculum},
                     {"curriculum_start", c.curriculum_start},
                     {"curriculum_steps", c.curriculum_steps},
                     {"dmd_weight", c.dmd_weight}};
}

void from_json(const nlohmann::json& j, Phase1Config& c) {
  Phase1Config d;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.fake_lr = j.value("fake_lr", d.fake_lr);
  c.betas = j.value("betas", d.betas);
  c.fake_updates = j.value("fake_updates", d.fake_updates);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.lora_alpha = j.value("lora_alpha", d.lora_alpha);
  c.t_lo = j.value("t_lo", d.t_lo);
  c.t_hi = j.value("t_hi", d.t_hi);
  c.normalize = j.value("normalize", d.normalize);
  c.curriculum = j.value("curriculum", d.curriculum);
  c.curriculum_start = j.value("curriculum_start", d.curriculum_start);
  c.curriculum_steps = j.value("curriculum_steps", d.curriculum_steps);
  c.dmd_weight = j.value("dmd_weight", d.dmd_weight);
}

torch::Tensor dmd_gradient(const torch::Tensor& x0_gen, const VelocityField& mu_real,
                           const VelocityField& mu_fake, const torch::Tensor& t,
                           const torch::Tensor& eps, const Condition& cond, bool normalize) {
  torch::NoGradGuard no_grad;
  if (t.le(0).any().item<bool>()) {
    throw std::domain_error("dmd_gradient: noise level must be > 0");
  }
  const auto x_t = interpolate(x0_gen.detach(), eps, t);
  const auto s_real = score_from_velocity(x_t, mu_real(x_t, t, cond), t);
  const auto s_fake = score_from_velocity(x_t, mu_fake(x_t, t, cond), t);
  auto g = -(s_real - s_fake);
  if (normalize) {
    std::vector<int64_t> dims;
    for (int64_t d = 1; d < g.dim(); ++d) dims.push_back(d);
    const auto scale = dims.empty() ? g.abs() : g.abs().mean(dims, /*keepdim=*/true);
    g = g / (scale + 1e-8);
  }
  return g;
}

torch::Tensor dmd_surrogate_loss(const torch::Tensor& x0_gen, const torch::Tensor& grad) {
  const auto target = (x0_gen - grad).detach();
  return 0.5 * (x0_gen - target).pow(2).mean();
}

torch::Tensor fake_model_loss(const VelocityField& mu_fake, const torch::Tensor& x0_gen,
                              const torch::Tensor& eps, const torch::Tensor& t,
                              const Condition& cond) {
  return diffusion_loss(mu_fake, x0_gen.detach(), eps, t, cond);
}

PrimingState make_priming_state(const Phase1Config& config, const VelocityNet& teacher) {
  if (!teacher) throw std::invalid_argument("phase1: missing teacher");
  if (config.fake_updates < 0 || config.batch < 1 || config.steps < 0) {
    throw std::invalid_argument("phase1: invalid step/batch/update counts");
  }
  PrimingState state;
  state.config = config;
  state.teacher = teacher;
  set_requires_grad(*state.teacher, false);
  state.generator = clone_net(teacher);
  set_requires_grad(*state.generator, true);
  state.fake = lora_attach(teacher, config.lora_rank, config.lora_alpha);
  state.generator_opt = std::make_unique<torch::optim::Adam>(
      make_adam(state.generator->parameters(), config.lr, config.betas));
  state.fake_opt = std::make_unique<torch::optim::Adam>(
      make_adam(trainable_parameters(*state.fake), config.fake_lr, config.betas));
  return state;
}

nlohmann::json PrimingMetrics::to_json() const {
  return nlohmann::json{{"step", step},       {"dmd_loss", dmd_loss}, {"fake_loss", fake_loss},
                        {"grad_norm", grad_norm}, {"t_hi", t_hi},     {"adv_g", adv_g},
                        {"adv_d", adv_d}};
}

double curriculum_t_hi(const Phase1Config& config, int64_t step) {
  if (!config.curriculum || config.curriculum_steps <= 0) return config.t_hi;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(config.curriculum_steps));
  return config.curriculum_start + (config.t_hi - config.curriculum_start) * frac;
}

PrimingMetrics priming_step(PrimingState& state, const ClipBatch& batch, torch::Generator& gen,
                            PrimingAdversary* adversary) {
  const auto& cfg = state.config;
  const auto cond = batch.condition();
  const int64_t B = batch.size();
  const auto shape = batch.video.sizes();
  const auto opts = batch.video.options();
  auto generator = as_field(state.generator);
  auto real = as_field(state.teacher);
  auto fake = as_field(state.fake);

  PrimingMetrics m;
  m.step = state.step;
  m.t_hi = std::max(cfg.t_lo, curriculum_t_hi(cfg, state.step));

  if (cfg.dmd_weight != 0.0 || adversary != nullptr) {
    const auto z = torch::randn(shape, gen, opts);
    const auto x0 = one_step_denoise(generator, z, 1.0, cond);
    const auto t = sample_levels(B, cfg.t_lo, m.t_hi, gen);
    const auto eps = torch::randn(shape, gen, opts);
    const auto g = dmd_gradient(x0, real, fake, t, eps, cond, cfg.normalize);
    auto loss = cfg.dmd_weight * dmd_surrogate_loss(x0, g);
    m.dmd_loss = 0.5 * g.pow(2).mean().item<double>();
    if (adversary != nullptr) {
      const auto adv = adversary->generator_loss(x0, cond, gen);
      m.adv_g = adv.item<double>();
      loss = loss + adv;
    }
    require_finite(loss.item<double>(), "generator loss", state.step, m.to_json(), state.dump_dir);
    state.generator_opt->zero_grad();
    loss.backward();
    m.grad_norm = grad_norm(state.generator->parameters());
    require_finite(m.grad_norm, "generator gradient norm", state.step, m.to_json(), state.dump_dir);
    state.generator_opt->step();
  }

  double fake_total = 0.0;
  double adv_total = 0.0;
  for (int64_t k = 0; k < cfg.fake_updates; ++k) {
    torch::Tensor x0;
    {
      torch::NoGradGuard no_grad;
      x0 = one_step_denoise(generator, torch::randn(shape, gen, opts), 1.0, cond);
    }
    const auto t = sample_levels(B, cfg.t_lo, cfg.t_hi, gen);
    const auto eps = torch::randn(shape, gen, opts);
    const auto loss = fake_model_loss(fake, x0, eps, t, cond);
    require_finite(loss.item<double>(), "fake loss", state.step, m.to_json(), state.dump_dir);
    state.fake_opt->zero_grad();
    loss.backward();
    state.fake_opt->step();
    fake_total += loss.item<double>();
    if (adversary != nullptr) adv_total += adversary->discriminator_step(x0, batch, gen);
  }
  if (cfg.fake_updates > 0) {
    m.fake_loss = fake_total / static_cast<double>(cfg.fake_updates);
    m.adv_d = adv_total / static_cast<double>(cfg.fake_updates);
  }
  ++state.step;
  return m;
}

VelocityNet run_priming(const Phase1Config& config, const VelocityNet& teacher,
                        const ClipBatch& dataset, const RunOptions& options,
                        const AdversaryFactory& make_adversary, const std::string& tag) {
  if (!teacher) throw std::invalid_argument(tag + ": missing teacher");
  torch::manual_seed(options.seed);
  auto gen = make_generator(derive_seed(options.seed, 11));
  auto state = make_priming_state(config, teacher);
  if (!options.out_dir.empty()) state.dump_dir = options.out_dir;
  std::unique_ptr<PrimingAdversary> adversary;
  if (make_adversary) adversary = make_adversary(state);
  MetricsWriter metrics(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "metrics.jsonl");
  CheckpointKeeper keeper(options, "generator", tag);

  for (int64_t step = 0; step < config.steps; ++step) {
    const auto batch = dataset.select(sample_indices(dataset.size(), config.batch, gen));
    const auto m = priming_step(state, batch, gen, adversary.get());
    metrics.write(m.to_json());
    if (options.log_every > 0 && (step + 1) % options.log_every == 0) {
      std::cout << "[" << tag << "] step " << step + 1 << " dmd " << m.dmd_loss << " fake "
                << m.fake_loss << std::endl;
    }
    keeper.maybe_save(state.generator, step + 1);
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "generator", state.generator,
                    {"generator", tag, state.step, options.seed});
  }
  return state.generator;
}

VelocityNet run_phase1(const Phase1Config& config, const VelocityNet& teacher,
                       const ClipBatch& dataset, const RunOptions& options) {
  return run_priming(config, teacher, dataset, options, nullptr, "phase1");
}

}  // namespace pose
