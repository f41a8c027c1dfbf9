#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cmath>

#include "pose/data.hpp"
#include "pose/phase1.hpp"
#include "pose/rng.hpp"

using namespace pose;

namespace {

VelocityField mixture_field(const GaussianMixture& mix) {
  return [mix](const torch::Tensor& x, const torch::Tensor& t, const Condition&) {
    return mix.optimal_velocity(x, t.flatten()[0].item<double>());
  };
}

DataConfig tiny_data() {
  DataConfig c;
  c.frames = 4;
  c.height = 8;
  c.width = 8;
  return c;
}

NetConfig tiny_net() {
  NetConfig c;
  c.height = 8;
  c.width = 8;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  return c;
}

Phase1Config tiny_phase1() {
  Phase1Config c;
  c.steps = 3;
  c.batch = 4;
  c.lr = 1e-3;
  c.fake_lr = 1e-3;
  c.fake_updates = 2;
  return c;
}

}  // namespace

TEST(DmdGradient, GaussianOracleFactorIsOne) {
  // Generator N(m, s^2) with m = 1, s = 1 against data N(0, 1) at t = 0.5:
  // g = (1 - t) m / ((1 - t)^2 s^2 + t^2) = 1 for every draw.
  const double m = 1.0, s = 1.0, t = 0.5;
  const auto real = make_gaussian_toy(1, {1.0}, {{0.0}}, {1.0});
  const auto fake = make_gaussian_toy(1, {1.0}, {{m}}, {s * s});
  const double analytic = (1 - t) * m / ((1 - t) * (1 - t) * s * s + t * t);
  EXPECT_DOUBLE_EQ(analytic, 1.0);

  const int64_t n = 100000;
  auto gen = make_generator(21);
  auto mean_param = torch::tensor({m}, torch::kDouble).requires_grad_(true);
  const auto x0 = mean_param + s * torch::randn({n, 1}, gen, torch::kDouble);
  const auto eps = torch::randn({n, 1}, gen, torch::kDouble);
  const auto levels = torch::full({n}, t, torch::kDouble);
  const auto g = dmd_gradient(x0, mixture_field(real), mixture_field(fake), levels, eps, {}, false);
  const double mc = g.mean().item<double>();
  const double se = g.std().item<double>() / std::sqrt(static_cast<double>(n));
  EXPECT_LE(std::abs(mc - analytic), std::max(3 * se, 1e-12));
  EXPECT_LE(std::abs(mc - analytic) / analytic, 0.05);

  // The surrogate routes exactly g / N into the generator parameters.
  dmd_surrogate_loss(x0, g).backward();
  EXPECT_NEAR(mean_param.grad().item<double>(), mc, 1e-9);
}

TEST(DmdGradient, MonteCarloMatchesAnalyticExpectation) {
  // s != 1: g varies per draw; E[g] = (1 - t) m / v_real with v_real = (1-t)^2 + t^2.
  const double m = 0.8, s = 0.6;
  const auto real = make_gaussian_toy(1, {1.0}, {{0.0}}, {1.0});
  const auto fake = make_gaussian_toy(1, {1.0}, {{m}}, {s * s});
  const int64_t n = 100000;
  auto gen = make_generator(22);
  for (double t : {0.3, 0.5, 0.8}) {
    const auto x0 = m + s * torch::randn({n, 1}, gen, torch::kDouble);
    const auto eps = torch::randn({n, 1}, gen, torch::kDouble);
    const auto g = dmd_gradient(x0, mixture_field(real), mixture_field(fake), torch::full({n}, t, torch::kDouble), eps, {}, false);
    const double v_real = (1 - t) * (1 - t) + t * t;
    const double expected = (1 - t) * m / v_real;
    const double se = g.std().item<double>() / std::sqrt(static_cast<double>(n));
    EXPECT_LE(std::abs(g.mean().item<double>() - expected), 3 * se) << "t=" << t;
  }
}

TEST(DmdGradient, IdenticalModelsGiveZero) {
  const auto real = make_gaussian_toy(1, {1.0}, {{0.0}}, {1.0});
  const auto x0 = torch::randn({64, 1}, torch::kDouble);
  const auto eps = torch::randn({64, 1}, torch::kDouble);
  const auto g = dmd_gradient(x0, mixture_field(real), mixture_field(real), torch::full({64}, 0.4, torch::kDouble), eps, {}, false);
  EXPECT_LT(g.abs().max().item<double>(), 1e-12);
}

TEST(DmdGradient, NormalisationAndDomain) {
  const auto real = make_gaussian_toy(1, {1.0}, {{0.0}}, {1.0});
  const auto fake = make_gaussian_toy(1, {1.0}, {{2.0}}, {0.5});
  const auto x0 = torch::randn({8, 5}, torch::kDouble);
  const auto eps = torch::randn({8, 5}, torch::kDouble);
  VelocityField fr = [&](const torch::Tensor& x, const torch::Tensor& t, const Condition&) {
    return real.optimal_velocity(x.reshape({-1, 1}), t.flatten()[0].item<double>()).reshape(x.sizes());
  };
  VelocityField ff = [&](const torch::Tensor& x, const torch::Tensor& t, const Condition&) {
    return fake.optimal_velocity(x.reshape({-1, 1}), t.flatten()[0].item<double>()).reshape(x.sizes());
  };
  const auto g = dmd_gradient(x0, fr, ff, torch::full({8}, 0.5, torch::kDouble), eps, {}, true);
  EXPECT_LT((g.abs().mean(1) - 1.0).abs().max().item<double>(), 1e-6);
  EXPECT_THROW(dmd_gradient(x0, fr, ff, torch::zeros({8}, torch::kDouble), eps, {}, true), std::domain_error);
}

TEST(DmdSurrogate, GradientIsGOverN) {
  auto x0 = torch::randn({4, 3}, torch::kDouble).requires_grad_(true);
  const auto g = torch::randn({4, 3}, torch::kDouble);
  dmd_surrogate_loss(x0, g).backward();
  EXPECT_LT((x0.grad() - g / 12.0).abs().max().item<double>(), 1e-15);
}

TEST(Curriculum, RampsFromStartToEnd) {
  Phase1Config c;
  EXPECT_DOUBLE_EQ(curriculum_t_hi(c, 0), 0.6);
  EXPECT_DOUBLE_EQ(curriculum_t_hi(c, c.curriculum_steps), c.t_hi);
  EXPECT_DOUBLE_EQ(curriculum_t_hi(c, 10 * c.curriculum_steps), c.t_hi);
  EXPECT_LT(curriculum_t_hi(c, 10), curriculum_t_hi(c, 100));
  c.curriculum = false;
  EXPECT_DOUBLE_EQ(curriculum_t_hi(c, 0), c.t_hi);
}

TEST(PrimingStep, ZeroWeightAndNoFakeUpdatesLeaveStateUnchanged) {
  auto cfg = tiny_phase1();
  cfg.dmd_weight = 0.0;
  cfg.fake_updates = 0;
  VelocityNet teacher(tiny_net());
  auto state = make_priming_state(cfg, teacher);
  const auto g0 = parameter_digest(*state.generator);
  const auto f0 = parameter_digest(*state.fake);
  const auto data = make_moving_blob(tiny_data(), 8, 1);
  auto gen = make_generator(1);
  priming_step(state, data.slice(0, 4), gen);
  EXPECT_EQ(parameter_digest(*state.generator), g0);
  EXPECT_EQ(parameter_digest(*state.fake), f0);
}

TEST(PrimingStep, RolesUpdateOnlyTheirParameters) {
  VelocityNet teacher(tiny_net());
  auto state = make_priming_state(tiny_phase1(), teacher);
  const auto t0 = parameter_digest(*state.teacher);
  const auto g0 = parameter_digest(*state.generator);
  std::vector<torch::Tensor> frozen_fake;
  for (const auto& item : state.fake->named_parameters()) {
    if (item.key().find("lora_") == std::string::npos) frozen_fake.push_back(item.value().clone());
  }
  const auto data = make_moving_blob(tiny_data(), 8, 2);
  auto gen = make_generator(2);
  // Step 0 sees s_fake == s_real, so the generator only moves from step 1 on.
  priming_step(state, data.slice(0, 4), gen);
  const auto m = priming_step(state, data.slice(4, 8), gen);
  EXPECT_EQ(parameter_digest(*state.teacher), t0);
  EXPECT_NE(parameter_digest(*state.generator), g0);
  size_t i = 0;
  for (const auto& item : state.fake->named_parameters()) {
    if (item.key().find("lora_") == std::string::npos) {
      EXPECT_TRUE(torch::equal(item.value(), frozen_fake[i++])) << item.key();
    }
  }
  bool lora_moved = false;
  for (auto& layer : state.fake->lora_layers()) lora_moved |= layer->lora_b.abs().max().item<double>() > 0;
  EXPECT_TRUE(lora_moved);
  EXPECT_TRUE(std::isfinite(m.dmd_loss));
  EXPECT_TRUE(std::isfinite(m.fake_loss));
}

TEST(PrimingStep, FakeModelStartsAsTeacherSoFirstGradientVanishes) {
  // Zero-initialised adapters make s_fake == s_real before any fake update.
  VelocityNet teacher(tiny_net());
  auto state = make_priming_state(tiny_phase1(), teacher);
  const auto data = make_moving_blob(tiny_data(), 4, 3);
  auto gen = make_generator(3);
  const auto cond = data.condition();
  const auto x0 = torch::randn(data.video.sizes(), gen);
  const auto g = dmd_gradient(x0, as_field(state.teacher), as_field(state.fake), torch::full({4}, 0.5),
                              torch::randn(data.video.sizes(), gen), cond, false);
  EXPECT_LT(g.abs().max().item<double>(), 1e-5);
}

TEST(RunPhase1, SeedDeterminism) {
  VelocityNet teacher(tiny_net());
  const auto data = make_moving_blob(tiny_data(), 16, 4);
  RunOptions opts;
  opts.seed = 5;
  const auto a = run_phase1(tiny_phase1(), teacher, data, opts);
  const auto b = run_phase1(tiny_phase1(), teacher, data, opts);
  EXPECT_EQ(parameter_digest(*a), parameter_digest(*b));
  opts.seed = 6;
  EXPECT_NE(parameter_digest(*run_phase1(tiny_phase1(), teacher, data, opts)), parameter_digest(*a));
}

TEST(Phase1Config, JsonRoundTrip) {
  auto c = tiny_phase1();
  c.curriculum = false;
  nlohmann::json j = c;
  const auto back = j.get<Phase1Config>();
  EXPECT_EQ(back.steps, c.steps);
  EXPECT_EQ(back.fake_updates, c.fake_updates);
  EXPECT_EQ(back.curriculum, false);
  EXPECT_DOUBLE_EQ(back.lr, c.lr);
}
