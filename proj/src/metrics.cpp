#include "pose/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "pose/errors.hpp"
#include "pose/rng.hpp"

namespace pose {

namespace {

torch::Tensor flatten_rows(const torch::Tensor& x) {
  if (x.dim() < 1) throw std::invalid_argument("expected a batch of samples");
  return x.reshape({x.size(0), -1}).to(torch::kDouble).contiguous();
}

std::vector<double> column(const torch::Tensor& m, int64_t j) {
  const auto c = m.select(1, j).contiguous();
  return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

}  // namespace

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  // Walk the merged quantile breakpoints i/na and j/nb.
  size_t i = 0;
  size_t j = 0;
  double u = 0.0;
  double total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return total;
}

double sliced_wasserstein(const torch::Tensor& a, const torch::Tensor& b, int64_t n_projections,
                          uint64_t seed) {
  const auto fa = flatten_rows(a);
  const auto fb = flatten_rows(b);
  if (fa.size(1) != fb.size(1)) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  if (fa.size(0) < 2 || fb.size(0) < 2) throw std::invalid_argument("sliced_wasserstein: need at least 2 samples per set");
  if (n_projections < 1) throw std::invalid_argument("sliced_wasserstein: n_projections must be >= 1");
  auto gen = make_generator(seed);
  auto dirs = torch::randn({fa.size(1), n_projections}, gen, torch::kDouble);
  dirs = dirs / dirs.norm(2, {0}, true).clamp_min(1e-300);
  const auto pa = fa.matmul(dirs);
  const auto pb = fb.matmul(dirs);
  double total = 0.0;
  for (int64_t k = 0; k < n_projections; ++k) total += wasserstein_1d(column(pa, k), column(pb, k));
  return total / static_cast<double>(n_projections);
}

double mmd_rbf(const torch::Tensor& a, const torch::Tensor& b, bool unbiased, double bandwidth) {
  const auto fa = flatten_rows(a);
  const auto fb = flatten_rows(b);
  if (fa.size(1) != fb.size(1)) throw std::invalid_argument("mmd_rbf: dimension mismatch");
  const int64_t n = fa.size(0);
  const int64_t m = fb.size(0);
  if (n < 2 || m < 2) throw std::invalid_argument("mmd_rbf: need at least 2 samples per set");
  const auto pooled = torch::cat({fa, fb}, 0);
  const auto d2 = torch::cdist(pooled, pooled).pow(2);
  double h = bandwidth;
  if (h <= 0.0) {
    const auto upper = torch::triu_indices(n + m, n + m, 1);
    const auto pairs = d2.index({upper[0], upper[1]}).contiguous();
    h = median(std::vector<double>(pairs.data_ptr<double>(), pairs.data_ptr<double>() + pairs.numel()));
    h = std::max(h, 1e-12);
  }
  const auto k = torch::exp(-d2 / h);
  const auto kxx = k.slice(0, 0, n).slice(1, 0, n);
  const auto kyy = k.slice(0, n).slice(1, n);
  const auto kxy = k.slice(0, 0, n).slice(1, n);
  const double dn = static_cast<double>(n);
  const double dm = static_cast<double>(m);
  if (unbiased) {
    const double sxx = (kxx.sum().item<double>() - kxx.diagonal().sum().item<double>()) / (dn * (dn - 1));
    const double syy = (kyy.sum().item<double>() - kyy.diagonal().sum().item<double>()) / (dm * (dm - 1));
    return sxx + syy - 2.0 * kxy.mean().item<double>();
  }
  // The biased statistic is a squared RKHS norm; clamp rounding below zero.
  const double v = kxx.mean().item<double>() + kyy.mean().item<double>() - 2.0 * kxy.mean().item<double>();
  return std::max(v, 0.0);
}

RandomFeatureMap::RandomFeatureMap(int64_t input_dim, int64_t output_dim, uint64_t seed) {
  if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("RandomFeatureMap: bad dimensions");
  auto gen = make_generator(seed);
  weight_ = torch::randn({input_dim, output_dim}, gen, torch::kDouble) / std::sqrt(static_cast<double>(input_dim));
}

torch::Tensor RandomFeatureMap::operator()(const torch::Tensor& x) const {
  const auto f = flatten_rows(x);
  if (f.size(1) != weight_.size(0)) throw std::invalid_argument("RandomFeatureMap: input dimension mismatch");
  return torch::tanh(f.matmul(weight_));
}

TemporalMetrics temporal_metrics(const torch::Tensor& videos) {
  if (videos.dim() < 3) throw std::invalid_argument("temporal_metrics: expected (B, F, ...)");
  const int64_t F = videos.size(1);
  if (F < 3) throw std::invalid_argument("temporal_metrics: need at least 3 frames");
  const auto v = videos.reshape({videos.size(0), F, -1}).to(torch::kDouble);
  const auto prev = v.slice(1, 0, F - 1);
  const auto next = v.slice(1, 1, F);
  TemporalMetrics out;
  out.dynamic_degree = (next - prev).pow(2).mean().item<double>();
  out.motion_smoothness = (v.slice(1, 2, F) - 2 * v.slice(1, 1, F - 1) + v.slice(1, 0, F - 2)).pow(2).mean().item<double>();

  const auto a = prev - prev.mean(-1, true);
  const auto b = next - next.mean(-1, true);
  const auto va = a.pow(2).sum(-1);
  const auto vb = b.pow(2).sum(-1);
  const auto denom = (va * vb).sqrt();
  auto corr = (a * b).sum(-1) / denom.clamp_min(1e-300);
  // Constant frames: perfectly consistent when identical, otherwise not.
  const auto degenerate = denom.le(0);
  if (degenerate.any().item<bool>()) {
    const auto identical = (prev - next).abs().amax(-1).le(0).to(torch::kDouble);
    corr = torch::where(degenerate, identical, corr);
  }
  out.subject_consistency = corr.mean().item<double>();
  return out;
}

double condition_fidelity(const torch::Tensor& videos, const torch::Tensor& conditions) {
  if (videos.dim() != 5) throw std::invalid_argument("condition_fidelity: videos must be (B, F, C, H, W)");
  const auto cond = conditions.dim() == 5 ? conditions.select(1, 0) : conditions;
  if (cond.size(0) != videos.size(0)) throw std::invalid_argument("condition_fidelity: batch mismatch");
  const auto first = videos.select(1, 0);
  if (cond.sizes() != first.sizes()) throw std::invalid_argument("condition_fidelity: frame shape mismatch");
  return (first.to(torch::kDouble) - cond.to(torch::kDouble)).pow(2).mean().item<double>();
}

int64_t reported_nfe(int64_t steps, bool guided) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  return guided ? 2 * steps : steps;
}

std::vector<LatencyRow> latency_report(const VelocityField& model, const torch::Tensor& x_T,
                                       const Condition& cond, const std::vector<int64_t>& steps,
                                       bool guided, int repeats) {
  for (auto s : steps) {
    if (s < 1) throw std::invalid_argument("latency_report: steps must be >= 1");
  }
  torch::NoGradGuard no_grad;
  euler_sample(model, x_T, 1, cond);  // warm-up
  std::vector<LatencyRow> rows;
  for (auto s : steps) {
    std::vector<double> times;
    for (int r = 0; r < std::max(repeats, 1); ++r) {
      const auto start = std::chrono::steady_clock::now();
      euler_sample(model, x_T, s, cond);
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    rows.push_back({s, reported_nfe(s, guided), median(times)});
  }
  return rows;
}

namespace {

template <typename T>
void put(nlohmann::json& j, const char* key, const std::optional<T>& v) {
  j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T>
void get(const nlohmann::json& j, const char* key, std::optional<T>& v) {
  if (j.contains(key) && !j.at(key).is_null()) {
    v = j.at(key).get<T>();
  } else {
    v.reset();
  }
}

}  // namespace

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json::object();
  put(j, "sliced_wasserstein", r.sliced_wasserstein);
  put(j, "mmd_rbf", r.mmd_rbf);
  put(j, "feature_sw", r.feature_sw);
  put(j, "feature_mmd", r.feature_mmd);
  put(j, "motion_smoothness", r.motion_smoothness);
  put(j, "subject_consistency", r.subject_consistency);
  put(j, "condition_mse", r.condition_mse);
  put(j, "dynamic_degree", r.dynamic_degree);
  j["nfe"] = r.nfe;
  j["wall_time_s"] = r.wall_time_s;
  put(j, "composite", r.composite);
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  get(j, "sliced_wasserstein", r.sliced_wasserstein);
  get(j, "mmd_rbf", r.mmd_rbf);
  get(j, "feature_sw", r.feature_sw);
  get(j, "feature_mmd", r.feature_mmd);
  get(j, "motion_smoothness", r.motion_smoothness);
  get(j, "subject_consistency", r.subject_consistency);
  get(j, "condition_mse", r.condition_mse);
  get(j, "dynamic_degree", r.dynamic_degree);
  r.nfe = j.value("nfe", int64_t{0});
  r.wall_time_s = j.value("wall_time_s", 0.0);
  get(j, "composite", r.composite);
}

void to_json(nlohmann::json& j, const CompositeWeights& w) {
  j = nlohmann::json{{"sw", w.sw}, {"consistency", w.consistency}, {"smoothness", w.smoothness}, {"condition", w.condition}};
}

void from_json(const nlohmann::json& j, CompositeWeights& w) {
  CompositeWeights d;
  w.sw = j.value("sw", d.sw);
  w.consistency = j.value("consistency", d.consistency);
  w.smoothness = j.value("smoothness", d.smoothness);
  w.condition = j.value("condition", d.condition);
}

CompositeReference CompositeReference::from_report(const EvalReport& teacher) {
  if (!teacher.sliced_wasserstein || !teacher.motion_smoothness || !teacher.condition_mse) {
    throw EvaluationError("composite reference: teacher report is incomplete");
  }
  constexpr double kFloor = 1e-8;
  return {std::max(*teacher.sliced_wasserstein, kFloor), std::max(*teacher.motion_smoothness, kFloor),
          std::max(*teacher.condition_mse, kFloor)};
}

void to_json(nlohmann::json& j, const CompositeReference& r) {
  j = nlohmann::json{{"sw", r.sw}, {"smoothness", r.smoothness}, {"condition_mse", r.condition_mse}};
}

void from_json(const nlohmann::json& j, CompositeReference& r) {
  r.sw = j.at("sw").get<double>();
  r.smoothness = j.at("smoothness").get<double>();
  r.condition_mse = j.at("condition_mse").get<double>();
}

double composite_score(const EvalReport& report, const CompositeReference& ref,
                       const CompositeWeights& weights) {
  const auto need = [](const std::optional<double>& v, const char* name) {
    if (!v) throw EvaluationError(std::string("composite_score: missing ") + name);
    if (!std::isfinite(*v)) throw EvaluationError(std::string("composite_score: non-finite ") + name);
    return *v;
  };
  const double sw = need(report.sliced_wasserstein, "sliced_wasserstein");
  const double consistency = need(report.subject_consistency, "subject_consistency");
  const double smooth = need(report.motion_smoothness, "motion_smoothness");
  const double mse = need(report.condition_mse, "condition_mse");
  if (ref.sw <= 0.0 || ref.smoothness <= 0.0 || ref.condition_mse <= 0.0) {
    throw EvaluationError("composite_score: reference normalisers must be positive");
  }
  return weights.sw * (1.0 - sw / ref.sw) + weights.consistency * consistency +
         weights.smoothness * (1.0 - smooth / ref.smoothness) +
         weights.condition * (1.0 - mse / ref.condition_mse);
}

void to_json(nlohmann::json& j, const EvalOptions& o) {
  j = nlohmann::json{{"n_projections", o.n_projections},
                     {"feature_dim", o.feature_dim},
                     {"projection_seed", o.projection_seed},
                     {"noise_seed", o.noise_seed},
                     {"batch", o.batch},
                     {"guided", o.guided}};
}

void from_json(const nlohmann::json& j, EvalOptions& o) {
  EvalOptions d;
  o.n_projections = j.value("n_projections", d.n_projections);
  o.feature_dim = j.value("feature_dim", d.feature_dim);
  o.projection_seed = j.value("projection_seed", d.projection_seed);
  o.noise_seed = j.value("noise_seed", d.noise_seed);
  o.batch = j.value("batch", d.batch);
  o.guided = j.value("guided", d.guided);
}

EvalReport score_samples(const torch::Tensor& samples, const ClipBatch& reference,
                         const EvalOptions& options) {
  EvalReport r;
  const auto gen = samples.to(torch::kDouble);
  const auto ref = reference.video.to(torch::kDouble);
  r.sliced_wasserstein = sliced_wasserstein(gen, ref, options.n_projections, options.projection_seed);
  r.mmd_rbf = mmd_rbf(gen, ref);
  const RandomFeatureMap features(gen[0].numel(), options.feature_dim, derive_seed(options.projection_seed, 1));
  const auto fg = features(gen);
  const auto fr = features(ref);
  r.feature_sw = sliced_wasserstein(fg, fr, options.n_projections, derive_seed(options.projection_seed, 2));
  r.feature_mmd = mmd_rbf(fg, fr);
  const auto tm = temporal_metrics(gen);
  r.motion_smoothness = tm.motion_smoothness;
  r.subject_consistency = tm.subject_consistency;
  r.dynamic_degree = tm.dynamic_degree;
  if (gen.size(0) == reference.size()) {
    r.condition_mse = condition_fidelity(gen, reference.condition_frame);
  }
  return r;
}

Evaluation evaluate(const VelocityNet& model, const ClipBatch& test, int64_t steps,
                    const EvalOptions& options) {
  if (steps < 1) throw std::invalid_argument("evaluate: steps must be >= 1");
  if (test.size() < 2) throw EvaluationError("evaluate: test set needs at least 2 clips");
  torch::NoGradGuard no_grad;
  auto field = as_field(model);
  auto gen = make_generator(options.noise_seed);
  const auto noise = torch::randn(test.video.sizes(), gen, test.video.options());
  std::vector<torch::Tensor> chunks;
  const auto start = std::chrono::steady_clock::now();
  for (int64_t begin = 0; begin < test.size(); begin += options.batch) {
    const int64_t end = std::min(test.size(), begin + options.batch);
    const auto part = test.slice(begin, end);
    chunks.push_back(euler_sample(field, noise.slice(0, begin, end), steps, part.condition()).x);
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Evaluation out;
  out.samples = torch::cat(chunks, 0);
  if (!torch::isfinite(out.samples).all().item<bool>()) {
    throw EvaluationError("evaluate: generated samples contain non-finite values");
  }
  out.report = score_samples(out.samples, test, options);
  out.report.nfe = reported_nfe(steps, options.guided);
  out.report.wall_time_s = elapsed;
  return out;
}

}  // namespace pose
