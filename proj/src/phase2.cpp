#include "pose/phase2.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

#include "pose/errors.hpp"
#include "pose/rng.hpp"

namespace pose {

namespace {

std::vector<int64_t> sample_dims(const torch::Tensor& x) {
  std::vector<int64_t> dims;
  for (int64_t d = 1; d < x.dim(); ++d) dims.push_back(d);
  return dims;
}

}  // namespace

void to_json(nlohmann::json& j, const Phase2Config& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"head_lr", c.head_lr},
                     {"betas", c.betas},
                     {"lambda", c.lambda},
                     {"eta", c.eta},
                     {"adv_weight", c.adv_weight},
                     {"ema_decay", c.ema_decay},
                     {"t_lo", c.t_lo},
                     {"t_hi", c.t_hi},
                     {"consist_t", c.consist_t ? nlohmann::json(*c.consist_t) : nlohmann::json(nullptr)},
                     {"loss", c.loss == AdversarialForm::kHinge ? "hinge" : "non_saturating"},
                     {"r1", c.r1 == R1Mode::kSecondOrder ? "second_order" : "detached"},
                     {"r1_on_fake", c.r1_on_fake},
                     {"perturbation", c.perturbation},
                     {"head", c.head == HeadKind::kSemantic ? "semantic" : "conv"},
                     {"head_queries", c.head_queries},
                     {"divergence_threshold", c.divergence_threshold},
                     {"divergence_patience", c.divergence_patience}};
}

void from_json(const nlohmann::json& j, Phase2Config& c) {
  Phase2Config d;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.head_lr = j.value("head_lr", d.head_lr);
  c.betas = j.value("betas", d.betas);
  c.lambda = j.value("lambda", d.lambda);
  c.eta = j.value("eta", d.eta);
  c.adv_weight = j.value("adv_weight", d.adv_weight);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.t_lo = j.value("t_lo", d.t_lo);
  c.t_hi = j.value("t_hi", d.t_hi);
  if (j.contains("consist_t") && !j.at("consist_t").is_null()) {
    c.consist_t = j.at("consist_t").get<std::array<double, 2>>();
  } else {
    c.consist_t.reset();
  }
  const auto loss = j.value("loss", std::string("hinge"));
  if (loss == "hinge") {
    c.loss = AdversarialForm::kHinge;
  } else if (loss == "non_saturating") {
    c.loss = AdversarialForm::kNonSaturating;
  } else {
    throw std::invalid_argument("unknown adversarial loss '" + loss + "'");
  }
  const auto r1 = j.value("r1", std::string("second_order"));
  if (r1 == "second_order") {
    c.r1 = R1Mode::kSecondOrder;
  } else if (r1 == "detached") {
    c.r1 = R1Mode::kDetached;
  } else {
    throw std::invalid_argument("unknown r1 mode '" + r1 + "'");
  }
  c.r1_on_fake = j.value("r1_on_fake", d.r1_on_fake);
  c.perturbation = j.value("perturbation", d.perturbation);
  const auto head = j.value("head", std::string("semantic"));
  if (head == "semantic") {
    c.head = HeadKind::kSemantic;
  } else if (head == "conv") {
    c.head = HeadKind::kConv;
  } else {
    throw std::invalid_argument("unknown head '" + head + "'");
  }
  c.head_queries = j.value("head_queries", d.head_queries);
  c.divergence_threshold = j.value("divergence_threshold", d.divergence_threshold);
  c.divergence_patience = j.value("divergence_patience", d.divergence_patience);
}

AdversarialLosses adversarial_losses(const torch::Tensor& real_logits,
                                     const torch::Tensor& fake_logits, AdversarialForm form) {
  if (form == AdversarialForm::kHinge) {
    return {-fake_logits.mean(),
            torch::relu(1 - real_logits).mean() + torch::relu(1 + fake_logits).mean()};
  }
  return {torch::softplus(-fake_logits).mean(),
          torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean()};
}

torch::Tensor st_r1_penalty(const DiscriminatorFn& disc, const torch::Tensor& x,
                            const torch::Tensor& t, const PerturbationSpec& spec, uint64_t seed,
                            R1Mode mode) {
  const auto pert = perturb_spatiotemporal(x.detach(), spec, t, seed);
  const auto dims = sample_dims(x);
  const auto denom = (pert.eps_s + pert.eps_t).pow(2).sum(dims);
  if (denom.le(0).any().item<bool>()) {
    throw std::invalid_argument("st_r1_penalty: perturbation is zero; spec must be nonzero");
  }

  auto x_in = x.detach().requires_grad_(true);
  const auto grad_x = torch::autograd::grad({disc(x_in, t).sum()}, {x_in}, {},
                                            /*retain_graph=*/true,
                                            /*create_graph=*/mode == R1Mode::kSecondOrder)[0];
  auto x_pert = pert.x_pert.detach().requires_grad_(true);
  const auto grad_p = torch::autograd::grad({disc(x_pert, pert.t_pert).sum()}, {x_pert}, {},
                                            /*retain_graph=*/true, /*create_graph=*/true)[0];
  const auto reference = mode == R1Mode::kSecondOrder ? grad_x : grad_x.detach();
  const auto numer = (grad_p - reference).pow(2).sum(dims);
  return (numer / denom).mean();
}

torch::Tensor frame_consistency_loss(const torch::Tensor& x0_gen, const VelocityField& mu_real,
                                     const torch::Tensor& t, const torch::Tensor& eps,
                                     const Condition& cond) {
  torch::Tensor x_hat;
  {
    torch::NoGradGuard no_grad;
    const auto x_t = interpolate(x0_gen.detach(), eps, t);
    x_hat = one_step_denoise(mu_real, x_t, t, cond);
  }
  return (x0_gen - x_hat).pow(2).mean();
}

EquilibriumState make_equilibrium_state(const Phase2Config& config, const VelocityNet& init,
                                        const VelocityNet& teacher) {
  if (!init) throw std::invalid_argument("phase2: missing initial generator");
  if (!teacher) throw std::invalid_argument("phase2: missing teacher");
  if (config.lambda < 0.0 || config.eta < 0.0) {
    throw std::invalid_argument("phase2: lambda and eta must be non-negative");
  }
  if (config.batch < 1 || config.steps < 0) throw std::invalid_argument("phase2: invalid batch/steps");
  if (config.consist_t && !((*config.consist_t)[0] > 0.0 && (*config.consist_t)[0] <= (*config.consist_t)[1] &&
                            (*config.consist_t)[1] <= 1.0)) {
    throw std::invalid_argument("phase2: consist_t must satisfy 0 < lo <= hi <= 1");
  }
  EquilibriumState state;
  state.config = config;
  state.teacher = teacher;
  set_requires_grad(*state.teacher, false);
  state.generator = clone_net(init);
  set_requires_grad(*state.generator, true);
  state.backbone = std::make_unique<EmaBackbone>(EmaBackbone::create(state.generator, config.ema_decay));
  const auto head_config = HeadConfig::from_net(init->config(), config.head_queries);
  if (config.head == HeadKind::kSemantic) {
    state.head = std::make_shared<SemanticHead>(head_config);
  } else {
    state.head = std::make_shared<ConvHead>(head_config);
  }
  state.head->to(init->embed->weight.scalar_type());
  state.generator_opt = std::make_unique<torch::optim::Adam>(
      make_adam(state.generator->parameters(), config.lr, config.betas));
  state.head_opt = std::make_unique<torch::optim::Adam>(
      make_adam(state.head->parameters(), config.head_lr, config.betas));
  return state;
}

nlohmann::json EquilibriumMetrics::to_json() const {
  return nlohmann::json{{"step", step},
                        {"adv_g", adv_g},
                        {"adv_d", adv_d},
                        {"st_r1", st_r1},
                        {"consist", consist},
                        {"logit_real_mean", logit_real_mean},
                        {"logit_fake_mean", logit_fake_mean}};
}

EquilibriumMetrics equilibrium_step(EquilibriumState& state, const ClipBatch& real,
                                    torch::Generator& gen, const StepProbe* probe) {
  const auto& cfg = state.config;
  const auto cond = real.condition();
  const int64_t B = real.size();
  const auto shape = real.video.sizes();
  const auto opts = real.video.options();
  auto generator = as_field(state.generator);
  auto& backbone = state.backbone->net;
  auto& head = *state.head;
  const DiscriminatorFn disc = [&](const torch::Tensor& x, const torch::Tensor& t) {
    return discriminator_forward(backbone, head, x, t, cond);
  };

  EquilibriumMetrics m;
  m.step = state.step;

  // (1) single-step samples from the trajectory endpoint.
  const auto z = torch::randn(shape, gen, opts);
  const auto x0 = one_step_denoise(generator, z, 1.0, cond);

  // (2) shared low-SNR perturbation law for generated and real clips.
  const auto t = sample_levels(B, cfg.t_lo, cfg.t_hi, gen);
  const auto eps_real = torch::randn(shape, gen, opts);
  const auto eps_fake = torch::randn(shape, gen, opts);
  const auto real_t = interpolate(real.video, eps_real, t);
  const uint64_t r1_seed = next_seed(gen);
  auto t_c = t;
  auto eps_c = eps_fake;
  if (cfg.consist_t) {
    t_c = sample_levels(B, (*cfg.consist_t)[0], (*cfg.consist_t)[1], gen);
    eps_c = torch::randn(shape, gen, opts);
  }

  // (3) discriminator update; only the head is optimised.
  {
    const auto fake_t = interpolate(x0.detach(), eps_fake, t);
    const auto logits_real = disc(real_t, t);
    const auto logits_fake = disc(fake_t, t);
    const auto losses = adversarial_losses(logits_real, logits_fake, cfg.loss);
    auto loss_d = cfg.adv_weight * losses.discriminator;
    if (cfg.eta != 0.0) {
      auto r1 = st_r1_penalty(disc, real_t, t, cfg.perturbation, r1_seed, cfg.r1);
      if (cfg.r1_on_fake) {
        r1 = 0.5 * (r1 + st_r1_penalty(disc, fake_t, t, cfg.perturbation, derive_seed(r1_seed, 1), cfg.r1));
      }
      m.st_r1 = r1.item<double>();
      loss_d = loss_d + cfg.eta * r1;
    }
    m.adv_d = losses.discriminator.item<double>();
    m.logit_real_mean = logits_real.mean().item<double>();
    m.logit_fake_mean = logits_fake.mean().item<double>();
    const double peak = std::max(logits_real.abs().max().item<double>(), logits_fake.abs().max().item<double>());
    require_finite(loss_d.item<double>(), "discriminator loss", state.step, m.to_json(), state.dump_dir);
    if (cfg.adv_weight != 0.0 || cfg.eta != 0.0) {
      state.head_opt->zero_grad();
      loss_d.backward();
      state.head_opt->step();
    }
    state.divergent_steps = peak > cfg.divergence_threshold ? state.divergent_steps + 1 : 0;
    if (state.divergent_steps >= cfg.divergence_patience) {
      throw TrainingError("phase2 diverged: |logits| > " + std::to_string(cfg.divergence_threshold) +
                          " for " + std::to_string(state.divergent_steps) + " consecutive steps");
    }
  }
  if (probe != nullptr && probe->after_discriminator) probe->after_discriminator(state);

  // (4) generator update: adversarial term plus frame consistency.
  {
    auto loss_g = torch::zeros({}, opts);
    if (cfg.adv_weight != 0.0) {
      const auto fake_t = interpolate(x0, eps_fake, t);
      const auto logits_fake = disc(fake_t, t);
      const auto adv_g = adversarial_losses(logits_fake.detach(), logits_fake, cfg.loss).generator;
      m.adv_g = adv_g.item<double>();
      loss_g = loss_g + cfg.adv_weight * adv_g;
    }
    if (cfg.lambda != 0.0) {
      const auto consist = frame_consistency_loss(x0, as_field(state.teacher), t_c, eps_c, cond);
      m.consist = consist.item<double>();
      loss_g = loss_g + cfg.lambda * consist;
    }
    require_finite(loss_g.item<double>(), "generator loss", state.step, m.to_json(), state.dump_dir);
    if (cfg.adv_weight != 0.0 || cfg.lambda != 0.0) {
      state.generator_opt->zero_grad();
      loss_g.backward();
      state.generator_opt->step();
    }
  }
  if (probe != nullptr && probe->after_generator) probe->after_generator(state);

  // (5) the backbone follows the generator.
  backbone_refresh(state.generator, *state.backbone);
  ++state.step;
  return m;
}

VelocityNet run_phase2(const Phase2Config& config, const VelocityNet& init,
                       const VelocityNet& teacher, const ClipBatch& dataset,
                       const RunOptions& options) {
  torch::manual_seed(options.seed);
  auto gen = make_generator(derive_seed(options.seed, 21));
  auto state = make_equilibrium_state(config, init, teacher);
  if (!options.out_dir.empty()) state.dump_dir = options.out_dir;
  MetricsWriter metrics(options.out_dir.empty() ? std::filesystem::path() : options.out_dir / "metrics.jsonl");
  CheckpointKeeper keeper(options, "generator", "phase2");

  for (int64_t step = 0; step < config.steps; ++step) {
    const auto batch = dataset.select(sample_indices(dataset.size(), config.batch, gen));
    const auto m = equilibrium_step(state, batch, gen);
    metrics.write(m.to_json());
    if (options.log_every > 0 && (step + 1) % options.log_every == 0) {
      std::cout << "[phase2] step " << step + 1 << " adv_g " << m.adv_g << " adv_d " << m.adv_d
                << " r1 " << m.st_r1 << " consist " << m.consist << std::endl;
    }
    keeper.maybe_save(state.generator, step + 1);
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "generator", state.generator,
                    {"generator", "phase2", state.step, options.seed});
  }
  return state.generator;
}

}  // namespace pose
