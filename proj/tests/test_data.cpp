#include <gtest/gtest.h>
#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "pose/data.hpp"
#include "pose/rng.hpp"

using namespace pose;

namespace {

DataConfig wide_config() {
  DataConfig c;
  c.frames = 8;
  c.height = 16;
  c.width = 32;
  return c;
}

// Intensity-weighted x centroid of one (C, H, W) frame above the background.
double centroid_x(const torch::Tensor& frame, double background) {
  const auto w = (frame.to(torch::kDouble) - background).clamp_min(0).sum({0, 1});  // (W)
  const auto xs = torch::arange(w.size(0), torch::kDouble);
  return ((w * xs).sum() / w.sum()).item<double>();
}

}  // namespace

TEST(MovingBlob, ShapesRangeAndCondition) {
  DataConfig c;
  const auto clips = make_moving_blob(c, 12, 1);
  EXPECT_EQ(clips.video.sizes(), (std::vector<int64_t>{12, 8, 1, 16, 16}));
  EXPECT_GE(clips.video.min().item<double>(), -1.0);
  EXPECT_LE(clips.video.max().item<double>(), 1.0);
  EXPECT_TRUE(torch::equal(clips.condition_frame, clips.video.select(1, 0)));
  EXPECT_EQ(clips.mask[0].item<float>(), 1.0f);
  EXPECT_EQ(clips.mask.slice(0, 1).sum().item<float>(), 0.0f);
  for (const auto& a : clips.attributes) {
    EXPECT_GE(a.speed, 0.0);
    EXPECT_NEAR(std::hypot(a.direction[0], a.direction[1]), 1.0, 1e-12);
  }
}

TEST(MovingBlob, SameSeedIsBitIdentical) {
  DataConfig c;
  EXPECT_TRUE(torch::equal(make_moving_blob(c, 16, 42).video, make_moving_blob(c, 16, 42).video));
  EXPECT_FALSE(torch::equal(make_moving_blob(c, 16, 42).video, make_moving_blob(c, 16, 43).video));
}

TEST(MovingBlob, ZeroSpeedIsStatic) {
  DataConfig c;
  c.speeds = {0.0};
  const auto clips = make_moving_blob(c, 8, 5);
  for (int64_t f = 1; f < c.frames; ++f) {
    EXPECT_TRUE(torch::equal(clips.video.select(1, f), clips.video.select(1, 0)));
  }
}

TEST(MovingBlob, CentroidAdvancesAtSpeed) {
  const auto c = wide_config();
  SceneAttributes a;
  a.shape_class = 0;
  a.direction = {1.0, 0.0};
  a.speed = 2.0;
  a.origin = {3.0, 7.0};
  const auto clip = render_clip(c, a);
  for (int64_t f = 0; f < c.frames; ++f) {
    const double expected = 3.0 + 2.0 * static_cast<double>(f);
    EXPECT_NEAR(centroid_x(clip[f], c.background), expected, 0.5) << "frame " << f;
  }
}

TEST(MovingBlob, SubPixelMotionIsBilinear) {
  auto c = wide_config();
  SceneAttributes a;
  a.shape_class = 0;
  a.direction = {1.0, 0.0};
  a.speed = 0.5;
  a.origin = {4.0, 7.0};
  const auto clip = render_clip(c, a);
  EXPECT_NEAR(centroid_x(clip[1], c.background), 4.5, 1e-4);
}

TEST(MovingBlob, WrapsToroidally) {
  auto c = wide_config();
  SceneAttributes a;
  a.direction = {1.0, 0.0};
  a.speed = 2.0;
  a.origin = {31.0, 7.0};
  const auto clip = render_clip(c, a);
  // Column 0 lights up from the stamp crossing the right edge.
  EXPECT_GT(clip[0].select(2, 0).max().item<double>(), c.background);
}

TEST(MovingBlob, AttributesAreUniform) {
  DataConfig c;
  const int64_t n = 4000;
  const auto clips = make_moving_blob(c, n, 77);
  std::map<int, int> shapes;
  for (const auto& a : clips.attributes) ++shapes[a.shape_class];
  // Chi-square with 3 dof; 16.27 is the 0.999 quantile.
  double chi2 = 0.0;
  const double expected = static_cast<double>(n) / 4.0;
  for (int s = 0; s < 4; ++s) chi2 += std::pow(shapes[s] - expected, 2) / expected;
  EXPECT_LT(chi2, 16.27);
}

TEST(MovingBlob, Errors) {
  DataConfig c;
  c.blob_radius = 9;
  EXPECT_THROW(make_moving_blob(c, 1, 0), std::invalid_argument);
  c = DataConfig{};
  c.frames = 1;
  EXPECT_THROW(make_moving_blob(c, 1, 0), std::invalid_argument);
  c = DataConfig{};
  c.width = 4;
  EXPECT_THROW(make_moving_blob(c, 1, 0), std::invalid_argument);
}

TEST(Conditioning, ReplicatesFirstFrameAndKeepsMaskedFrames) {
  auto video = torch::randn({2, 5, 1, 4, 4});
  const auto mask = make_mask(5, MaskMode::kFirstAndLast);
  const auto cond = conditioning_frames(video, mask);
  for (int64_t f = 0; f < 4; ++f) EXPECT_TRUE(torch::equal(cond.select(1, f), video.select(1, 0)));
  EXPECT_TRUE(torch::equal(cond.select(1, 4), video.select(1, 4)));
}

TEST(Dataset, RoundTrip) {
  DataConfig c;
  const auto clips = make_moving_blob(c, 6, 3);
  const auto dir = std::filesystem::temp_directory_path() / "pose_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  save_dataset(dir, clips, c, 3, "test");
  const auto back = load_dataset(dir);
  EXPECT_TRUE(torch::equal(back.video, clips.video));
  EXPECT_TRUE(torch::equal(back.mask, clips.mask));
  ASSERT_EQ(back.attributes.size(), clips.attributes.size());
  EXPECT_EQ(back.attributes[2].shape_class, clips.attributes[2].shape_class);
  EXPECT_EQ(back.attributes[2].speed, clips.attributes[2].speed);
  std::filesystem::remove_all(dir);
}

TEST(GaussianToy, MomentsAndScore) {
  const int64_t n = 100000;
  const auto single = make_gaussian_toy(1, {1.0}, {{0.0}}, {1.0});
  EXPECT_LT(std::abs(single.sample(n, 1).mean().item<double>()), 3.0 / std::sqrt(static_cast<double>(n)));

  const auto pair = make_gaussian_toy(1, {0.5, 0.5}, {{-2.0}, {2.0}}, {1.0, 1.0});
  const auto x = pair.sample(n, 2);
  const double se = x.std().item<double>() / std::sqrt(static_cast<double>(n));
  EXPECT_LT(std::abs(x.mean().item<double>()), 3.0 * se);

  const auto shifted = make_gaussian_toy(1, {1.0}, {{1.0}}, {1.0});
  EXPECT_NEAR(shifted.score(torch::zeros({1, 1}, torch::kDouble)).item<double>(), 1.0, 1e-15);
}

TEST(GaussianToy, ScoreMatchesLogDensityGradient) {
  const auto mix = make_gaussian_toy(2, {0.2, 0.8}, {{1.0, -1.0}, {-0.5, 0.5}}, {0.3, 0.6});
  auto x = torch::randn({16, 2}, torch::kDouble).requires_grad_(true);
  mix.log_density(x).sum().backward();
  EXPECT_LT((x.grad() - mix.score(x.detach())).abs().max().item<double>(), 1e-10);
}

TEST(GaussianToy, InvalidMixtureRejected) {
  EXPECT_THROW(make_gaussian_toy(1, {0.5, 0.6}, {{0.0}, {1.0}}, {1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(make_gaussian_toy(1, {1.0}, {{0.0}}, {0.0}), std::invalid_argument);
  EXPECT_THROW(make_gaussian_toy(2, {1.0}, {{0.0}}, {1.0}), std::invalid_argument);
}

TEST(Perturbation, StructureOfNoise) {
  auto gen = make_generator(4);
  const auto x = torch::randn({3, 6, 1, 4, 4}, gen, torch::kDouble);
  const auto t = torch::full({3}, 0.7, torch::kDouble);
  const PerturbationSpec spec{0.05, 0.1, 0.0};
  const auto p = perturb_spatiotemporal(x, spec, t, 9);
  EXPECT_LT((p.x_pert - (x + p.eps_s + p.eps_t)).abs().max().item<double>(), 1e-15);
  // eps_t is constant within each frame.
  const auto per_frame = p.eps_t.reshape({3, 6, -1});
  EXPECT_LT((per_frame - per_frame.select(2, 0).unsqueeze(2)).abs().max().item<double>(), 1e-15);
  EXPECT_TRUE(torch::equal(p.t_pert, t));
  EXPECT_NEAR(p.eps_s.std().item<double>(), 0.05, 0.01);
}

TEST(Perturbation, JitterStaysInUnitInterval) {
  const auto t = torch::tensor({0.999, 0.0001, 0.5}, torch::kDouble);
  const auto p = perturb_spatiotemporal(torch::zeros({3, 4, 1}, torch::kDouble), {0.0, 0.0, 0.5}, t, 2);
  EXPECT_GT(p.t_pert.min().item<double>(), 0.0);
  EXPECT_LE(p.t_pert.max().item<double>(), 1.0);
}

TEST(Perturbation, DeterministicAndValidated) {
  const auto x = torch::randn({2, 3, 1, 2, 2});
  const auto t = torch::full({2}, 0.5);
  const PerturbationSpec spec{};
  EXPECT_TRUE(torch::equal(perturb_spatiotemporal(x, spec, t, 5).x_pert, perturb_spatiotemporal(x, spec, t, 5).x_pert));
  EXPECT_THROW(perturb_spatiotemporal(x, {-0.1, 0.0, 0.0}, t, 5), std::invalid_argument);
}
