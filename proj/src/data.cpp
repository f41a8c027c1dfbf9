#include "pose/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "pose/rng.hpp"

namespace pose {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"frames", c.frames},
                     {"channels", c.channels},
                     {"height", c.height},
                     {"width", c.width},
                     {"shape_classes", c.shape_classes},
                     {"colors", c.colors},
                     {"directions", c.directions},
                     {"speeds", c.speeds},
                     {"blob_radius", c.blob_radius},
                     {"background", c.background},
                     {"mask_mode", c.mask_mode == MaskMode::kFirstFrame ? "first" : "first_last"},
                     {"train_clips", c.train_clips},
                     {"test_clips", c.test_clips},
                     {"teacher_mix", c.teacher_mix}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  DataConfig d;
  c.frames = j.value("frames", d.frames);
  c.channels = j.value("channels", d.channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.shape_classes = j.value("shape_classes", d.shape_classes);
  c.colors = j.value("colors", d.colors);
  c.directions = j.value("directions", d.directions);
  c.speeds = j.value("speeds", d.speeds);
  c.blob_radius = j.value("blob_radius", d.blob_radius);
  c.background = j.value("background", d.background);
  const auto mode = j.value("mask_mode", std::string("first"));
  if (mode == "first") {
    c.mask_mode = MaskMode::kFirstFrame;
  } else if (mode == "first_last") {
    c.mask_mode = MaskMode::kFirstAndLast;
  } else {
    throw std::invalid_argument("unknown mask_mode '" + mode + "'");
  }
  c.train_clips = j.value("train_clips", d.train_clips);
  c.test_clips = j.value("test_clips", d.test_clips);
  c.teacher_mix = j.value("teacher_mix", d.teacher_mix);
}

torch::Tensor make_mask(int64_t frames, MaskMode mode) {
  auto mask = torch::zeros({frames});
  mask[0] = 1.0;
  if (mode == MaskMode::kFirstAndLast) {
    mask[frames - 1] = 1.0;
  }
  return mask;
}

torch::Tensor conditioning_frames(const torch::Tensor& video, const torch::Tensor& mask) {
  const auto first = video.select(1, 0).unsqueeze(1).expand_as(video);
  const auto m = mask.to(video.dtype()).reshape({1, -1, 1, 1, 1});
  return m * video + (1 - m) * first;
}

Condition ClipBatch::condition() const {
  Condition cond;
  cond.frames = conditioning_frames(video, mask);
  cond.mask = mask.to(video.dtype());
  auto attrs = torch::empty({size(), 2}, torch::kInt64);
  auto acc = attrs.accessor<int64_t, 2>();
  for (int64_t i = 0; i < size(); ++i) {
    acc[i][0] = attributes[static_cast<size_t>(i)].shape_class;
    acc[i][1] = attributes[static_cast<size_t>(i)].color;
  }
  cond.attrs = attrs;
  return cond;
}

ClipBatch ClipBatch::select(const torch::Tensor& index) const {
  ClipBatch out;
  out.video = video.index_select(0, index);
  out.condition_frame = condition_frame.index_select(0, index);
  out.mask = mask;
  const auto idx = index.to(torch::kInt64).contiguous();
  const auto* p = idx.data_ptr<int64_t>();
  out.attributes.reserve(static_cast<size_t>(idx.numel()));
  for (int64_t i = 0; i < idx.numel(); ++i) {
    out.attributes.push_back(attributes.at(static_cast<size_t>(p[i])));
  }
  return out;
}

ClipBatch ClipBatch::slice(int64_t begin, int64_t end) const {
  return select(torch::arange(begin, std::min(end, size()), torch::kInt64));
}

namespace {

bool stamp_covers(int shape, int64_t u, int64_t v, int64_t r) {
  switch (shape) {
    case 0:  // square
      return true;
    case 1:  // plus
      return u == 0 || v == 0;
    case 2:  // diagonal cross
      return std::abs(u) == std::abs(v);
    case 3:  // ring
      return std::max(std::abs(u), std::abs(v)) == r;
    default:
      throw std::invalid_argument("unknown shape class");
  }
}

double color_level(int color, int64_t colors) {
  return 1.0 - 1.2 * static_cast<double>(color) / static_cast<double>(colors);
}

int64_t wrap(int64_t i, int64_t n) { return ((i % n) + n) % n; }

void validate(const DataConfig& c) {
  if (c.frames < 2) throw std::invalid_argument("moving blob: need at least 2 frames");
  if (c.height < 8 || c.width < 8) throw std::invalid_argument("moving blob: resolution below 8x8");
  if (c.channels < 1) throw std::invalid_argument("moving blob: need at least one channel");
  if (2 * c.blob_radius + 1 > std::min(c.height, c.width)) {
    throw std::invalid_argument("moving blob: blob larger than frame");
  }
  if (c.shape_classes < 1 || c.shape_classes > 4) {
    throw std::invalid_argument("moving blob: shape_classes must be in [1, 4]");
  }
  if (c.colors < 1 || c.directions < 1 || c.speeds.empty()) {
    throw std::invalid_argument("moving blob: empty attribute vocabulary");
  }
  for (double s : c.speeds) {
    if (s < 0.0) throw std::invalid_argument("moving blob: negative speed");
  }
}

}  // namespace

torch::Tensor render_clip(const DataConfig& config, const SceneAttributes& a) {
  validate(config);
  const int64_t F = config.frames, H = config.height, W = config.width, r = config.blob_radius;
  std::vector<double> coverage(static_cast<size_t>(F * H * W), 0.0);
  for (int64_t f = 0; f < F; ++f) {
    const double cx = a.origin[0] + static_cast<double>(f) * a.speed * a.direction[0];
    const double cy = a.origin[1] + static_cast<double>(f) * a.speed * a.direction[1];
    for (int64_t v = -r; v <= r; ++v) {
      for (int64_t u = -r; u <= r; ++u) {
        if (!stamp_covers(a.shape_class, u, v, r)) continue;
        const double px = cx + static_cast<double>(u);
        const double py = cy + static_cast<double>(v);
        const double fx = std::floor(px), fy = std::floor(py);
        const double wx = px - fx, wy = py - fy;
        const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy);
        const double w[4] = {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy};
        const int64_t xs[4] = {ix, ix + 1, ix, ix + 1};
        const int64_t ys[4] = {iy, iy, iy + 1, iy + 1};
        for (int k = 0; k < 4; ++k) {
          if (w[k] == 0.0) continue;
          coverage[static_cast<size_t>((f * H + wrap(ys[k], H)) * W + wrap(xs[k], W))] += w[k];
        }
      }
    }
  }
  const double level = color_level(a.color, config.colors);
  auto clip = torch::empty({F, config.channels, H, W});
  auto acc = clip.accessor<float, 4>();
  for (int64_t f = 0; f < F; ++f) {
    for (int64_t y = 0; y < H; ++y) {
      for (int64_t x = 0; x < W; ++x) {
        const double cov = std::min(1.0, coverage[static_cast<size_t>((f * H + y) * W + x)]);
        const double value = config.background + (level - config.background) * cov;
        for (int64_t c = 0; c < config.channels; ++c) {
          acc[f][c][y][x] = static_cast<float>(value);
        }
      }
    }
  }
  return clip;
}

ClipBatch make_moving_blob(const DataConfig& config, int64_t count, uint64_t seed) {
  validate(config);
  if (count < 0) throw std::invalid_argument("moving blob: negative count");
  std::mt19937_64 rng(seed);
  auto pick = [&rng](int64_t n) {
    return static_cast<int64_t>(std::uniform_int_distribution<int64_t>(0, n - 1)(rng));
  };
  ClipBatch batch;
  batch.mask = make_mask(config.frames, config.mask_mode);
  batch.video = torch::empty({count, config.frames, config.channels, config.height, config.width});
  batch.attributes.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    SceneAttributes a;
    a.shape_class = static_cast<int>(pick(config.shape_classes));
    a.color = static_cast<int>(pick(config.colors));
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(pick(config.directions)) /
                         static_cast<double>(config.directions);
    a.direction = {std::cos(angle), std::sin(angle)};
    a.speed = config.speeds[static_cast<size_t>(pick(static_cast<int64_t>(config.speeds.size())))];
    a.origin = {static_cast<double>(pick(config.width)), static_cast<double>(pick(config.height))};
    batch.video[i] = render_clip(config, a);
    batch.attributes.push_back(a);
  }
  batch.condition_frame = batch.video.select(1, 0).clone();
  return batch;
}

torch::Tensor sample_indices(int64_t population, int64_t batch, torch::Generator& gen) {
  return torch::randint(population, {batch}, gen, torch::TensorOptions().dtype(torch::kInt64));
}

// ---------------------------------------------------------------------------

GaussianMixture::GaussianMixture(std::vector<double> weights,
                                 std::vector<std::vector<double>> means,
                                 std::vector<double> variances)
    : weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances)) {
  if (weights_.empty() || weights_.size() != means_.size() ||
      weights_.size() != variances_.size()) {
    throw std::invalid_argument("gaussian mixture: component arrays disagree in length");
  }
  double total = 0.0;
  for (double w : weights_) {
    if (w < 0.0) throw std::invalid_argument("gaussian mixture: negative weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("gaussian mixture: weights must sum to 1");
  }
  for (double v : variances_) {
    if (!(v > 0.0)) throw std::invalid_argument("gaussian mixture: variances must be positive");
  }
  dims_ = static_cast<int64_t>(means_.front().size());
  if (dims_ < 1) throw std::invalid_argument("gaussian mixture: zero dimensions");
  for (const auto& m : means_) {
    if (static_cast<int64_t>(m.size()) != dims_) {
      throw std::invalid_argument("gaussian mixture: inconsistent mean dimensions");
    }
  }
}

GaussianMixture make_gaussian_toy(int64_t dims, const std::vector<double>& weights,
                                  const std::vector<std::vector<double>>& means,
                                  const std::vector<double>& variances) {
  GaussianMixture gm(weights, means, variances);
  if (gm.dims() != dims) throw std::invalid_argument("gaussian mixture: dims mismatch");
  return gm;
}

torch::Tensor GaussianMixture::sample(int64_t n, uint64_t seed) const {
  auto gen = make_generator(seed);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto w = torch::tensor(weights_, opts);
  const auto comp = torch::multinomial(w, n, /*replacement=*/true, gen);
  auto mu = torch::empty({static_cast<int64_t>(means_.size()), dims_}, opts);
  for (size_t k = 0; k < means_.size(); ++k) mu[static_cast<int64_t>(k)] = torch::tensor(means_[k], opts);
  const auto sd = torch::tensor(variances_, opts).sqrt();
  const auto z = torch::randn({n, dims_}, gen, opts);
  return mu.index_select(0, comp) + sd.index_select(0, comp).unsqueeze(1) * z;
}

GaussianMixture GaussianMixture::noised(double t) const {
  auto means = means_;
  auto vars = variances_;
  for (size_t k = 0; k < means.size(); ++k) {
    for (auto& m : means[k]) m *= (1.0 - t);
    vars[k] = (1.0 - t) * (1.0 - t) * vars[k] + t * t;
  }
  return GaussianMixture(weights_, std::move(means), std::move(vars));
}

torch::Tensor GaussianMixture::log_density(const torch::Tensor& x) const {
  const auto xd = x.to(torch::kFloat64);
  std::vector<torch::Tensor> terms;
  const double d = static_cast<double>(dims_);
  for (size_t k = 0; k < weights_.size(); ++k) {
    const auto mu = torch::tensor(means_[k], xd.options());
    const auto sq = (xd - mu).pow(2).sum(-1);
    terms.push_back(std::log(weights_[k]) - 0.5 * d * std::log(2 * std::numbers::pi * variances_[k]) -
                    0.5 * sq / variances_[k]);
  }
  return torch::logsumexp(torch::stack(terms, -1), -1);
}

torch::Tensor GaussianMixture::score(const torch::Tensor& x) const {
  const auto xd = x.to(torch::kFloat64);
  std::vector<torch::Tensor> logits;
  std::vector<torch::Tensor> grads;
  const double d = static_cast<double>(dims_);
  for (size_t k = 0; k < weights_.size(); ++k) {
    const auto mu = torch::tensor(means_[k], xd.options());
    const auto diff = xd - mu;
    logits.push_back(std::log(weights_[k]) - 0.5 * d * std::log(variances_[k]) -
                     0.5 * diff.pow(2).sum(-1) / variances_[k]);
    grads.push_back(-diff / variances_[k]);
  }
  const auto resp = torch::softmax(torch::stack(logits, -1), -1);  // (n, K)
  const auto g = torch::stack(grads, -1);                           // (n, d, K)
  return (g * resp.unsqueeze(-2)).sum(-1);
}

torch::Tensor GaussianMixture::mean() const {
  auto m = torch::zeros({dims_}, torch::kFloat64);
  for (size_t k = 0; k < weights_.size(); ++k) {
    m += weights_[k] * torch::tensor(means_[k], torch::kFloat64);
  }
  return m;
}

torch::Tensor GaussianMixture::optimal_velocity(const torch::Tensor& x_t, double t) const {
  if (t < 0.0 || t > 1.0) throw std::domain_error("optimal_velocity: t outside [0, 1]");
  const auto xd = x_t.to(torch::kFloat64);
  if (t >= 1.0) {
    return xd - mean();
  }
  const auto s = noised(t).score(xd);
  return -(xd + t * s) / (1.0 - t);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const PerturbationSpec& s) {
  j = nlohmann::json{{"sigma_s", s.sigma_s}, {"sigma_t", s.sigma_t}, {"t_jitter", s.t_jitter}};
}

void from_json(const nlohmann::json& j, PerturbationSpec& s) {
  PerturbationSpec d;
  s.sigma_s = j.value("sigma_s", d.sigma_s);
  s.sigma_t = j.value("sigma_t", d.sigma_t);
  s.t_jitter = j.value("t_jitter", d.t_jitter);
}

Perturbation perturb_spatiotemporal(const torch::Tensor& x, const PerturbationSpec& spec,
                                    const torch::Tensor& t, uint64_t seed) {
  if (spec.sigma_s < 0.0 || spec.sigma_t < 0.0 || spec.t_jitter < 0.0) {
    throw std::invalid_argument("perturbation scales must be non-negative");
  }
  if (x.dim() < 2) throw std::invalid_argument("perturbation expects a (B, F, ...) tensor");
  auto gen = make_generator(seed);
  const auto opts = x.options().requires_grad(false);
  const int64_t B = x.size(0), F = x.size(1);

  Perturbation p;
  p.eps_s = spec.sigma_s * torch::randn(x.sizes(), gen, opts);

  // Frame-wise Gaussian walk, smoothed with a length-3 moving average.
  const auto walk = torch::randn({B, F}, gen, opts).cumsum(1);
  auto smooth = torch::empty_like(walk);
  for (int64_t f = 0; f < F; ++f) {
    const int64_t lo = std::max<int64_t>(0, f - 1), hi = std::min<int64_t>(F - 1, f + 1);
    smooth.select(1, f).copy_(walk.slice(1, lo, hi + 1).mean(1));
  }
  std::vector<int64_t> shape(static_cast<size_t>(x.dim()), 1);
  shape[0] = B;
  shape[1] = F;
  p.eps_t = (spec.sigma_t * smooth).reshape(shape).expand(x.sizes()).contiguous();

  p.x_pert = x + p.eps_s + p.eps_t;
  const auto jitter = torch::randn(t.sizes(), gen, t.options().requires_grad(false));
  if (spec.t_jitter == 0.0) {
    p.t_pert = t;
  } else {
    p.t_pert = (t + spec.t_jitter * jitter).clamp(1e-4, 1.0);
  }
  return p;
}

// ---------------------------------------------------------------------------

void save_dataset(const fs::path& dir, const ClipBatch& clips, const DataConfig& config,
                  uint64_t seed, const std::string& split) {
  fs::create_directories(dir);
  torch::save(clips.video.contiguous(), (dir / "video.pt").string());
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : clips.attributes) {
    attrs.push_back({{"shape_class", a.shape_class},
                     {"color", a.color},
                     {"direction", a.direction},
                     {"speed", a.speed},
                     {"origin", a.origin}});
  }
  std::vector<float> mask(static_cast<size_t>(clips.mask.numel()));
  for (int64_t i = 0; i < clips.mask.numel(); ++i) mask[static_cast<size_t>(i)] = clips.mask[i].item<float>();
  const nlohmann::json manifest{{"split", split},
                                {"shape", clips.video.sizes().vec()},
                                {"dtype", "float32"},
                                {"seed", seed},
                                {"mask", mask},
                                {"config", config},
                                {"attributes", attrs}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

ClipBatch load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("dataset manifest not found in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  ClipBatch clips;
  torch::load(clips.video, (dir / "video.pt").string());
  const auto shape = manifest.at("shape").get<std::vector<int64_t>>();
  if (clips.video.sizes().vec() != shape) {
    throw std::runtime_error("dataset tensor shape disagrees with manifest");
  }
  clips.mask = torch::tensor(manifest.at("mask").get<std::vector<float>>());
  clips.condition_frame = clips.video.select(1, 0).clone();
  for (const auto& a : manifest.at("attributes")) {
    SceneAttributes s;
    s.shape_class = a.at("shape_class").get<int>();
    s.color = a.at("color").get<int>();
    s.direction = a.at("direction").get<std::array<double, 2>>();
    s.speed = a.at("speed").get<double>();
    s.origin = a.at("origin").get<std::array<double, 2>>();
    clips.attributes.push_back(s);
  }
  return clips;
}

}  // namespace pose
