#include "pose/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pose {

namespace fs = std::filesystem;
namespace nn = torch::nn;

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"channels", c.channels},   {"height", c.height},
                     {"width", c.width},         {"patch", c.patch},
                     {"dim", c.dim},             {"depth", c.depth},
                     {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio},
                     {"shape_classes", c.shape_classes}, {"colors", c.colors}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  NetConfig d;
  c.channels = j.value("channels", d.channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.patch = j.value("patch", d.patch);
  c.dim = j.value("dim", d.dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.shape_classes = j.value("shape_classes", d.shape_classes);
  c.colors = j.value("colors", d.colors);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double scale) {
  const int64_t half = dim / 2;
  const auto opts = t.options().requires_grad(false);
  const auto freqs =
      torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
  const auto args = (scale * t.reshape({-1, 1})) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, -1);
  if (dim % 2 == 1) {
    emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, emb.options())}, -1);
  }
  return emb;
}

torch::Tensor patchify(const torch::Tensor& x, int64_t patch) {
  const int64_t B = x.size(0), F = x.size(1), C = x.size(2), H = x.size(3), W = x.size(4);
  if (H % patch != 0 || W % patch != 0) {
    throw std::invalid_argument("patchify: resolution not divisible by patch size");
  }
  const int64_t gh = H / patch, gw = W / patch;
  return x.reshape({B, F, C, gh, patch, gw, patch})
      .permute({0, 1, 3, 5, 2, 4, 6})
      .reshape({B, F * gh * gw, C * patch * patch});
}

torch::Tensor unpatchify(const torch::Tensor& tokens, int64_t frames, int64_t channels,
                         int64_t height, int64_t width, int64_t patch) {
  const int64_t B = tokens.size(0), gh = height / patch, gw = width / patch;
  return tokens.reshape({B, frames, gh, gw, channels, patch, patch})
      .permute({0, 1, 4, 2, 5, 3, 6})
      .reshape({B, frames, channels, height, width});
}

// ---------------------------------------------------------------------------

LoraLinearImpl::LoraLinearImpl(int64_t in_features, int64_t out_features, bool bias)
    : in_features_(in_features), out_features_(out_features) {
  base = register_module("base", nn::Linear(nn::LinearOptions(in_features, out_features).bias(bias)));
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
  auto y = base->forward(x);
  if (rank_ > 0) {
    y = y + scale_ * torch::matmul(torch::matmul(x, lora_a.t()), lora_b.t());
  }
  return y;
}

void LoraLinearImpl::attach(int64_t rank, double alpha) {
  if (rank < 1) throw std::invalid_argument("lora: rank must be >= 1");
  if (rank > std::min(in_features_, out_features_)) {
    throw std::invalid_argument("lora: rank exceeds min(d_in, d_out)");
  }
  if (rank_ > 0) throw std::logic_error("lora: adapter already attached");
  const auto opts = base->weight.options().requires_grad(false);
  lora_a = register_parameter(
      "lora_a", torch::randn({rank, in_features_}, opts) / std::sqrt(static_cast<double>(in_features_)));
  lora_b = register_parameter("lora_b", torch::zeros({out_features_, rank}, opts));
  rank_ = rank;
  scale_ = alpha / static_cast<double>(rank);
}

void LoraLinearImpl::freeze_base() {
  for (auto& p : base->parameters()) p.set_requires_grad(false);
}

torch::Tensor LoraLinearImpl::effective_weight() const {
  if (rank_ == 0) return base->weight;
  return base->weight + scale_ * lora_b.mm(lora_a);
}

// ---------------------------------------------------------------------------

SelfAttentionImpl::SelfAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
  q = register_module("q", LoraLinear(dim, dim));
  k = register_module("k", LoraLinear(dim, dim));
  v = register_module("v", LoraLinear(dim, dim));
  out = register_module("out", LoraLinear(dim, dim));
}

namespace {

torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
  const int64_t B = x.size(0), N = x.size(1), D = x.size(2);
  return x.reshape({B, N, heads, D / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
  const int64_t B = x.size(0), H = x.size(1), N = x.size(2), Dh = x.size(3);
  return x.transpose(1, 2).reshape({B, N, H * Dh});
}

// Plain matmul/softmax attention; kept explicit so double backward works.
torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  const auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
  return torch::matmul(weights, v);
}

torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& shift, const torch::Tensor& scale) {
  return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1);
}

}  // namespace

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto qh = split_heads(q->forward(x), heads_);
  const auto kh = split_heads(k->forward(x), heads_);
  const auto vh = split_heads(v->forward(x), heads_);
  return out->forward(merge_heads(attend(qh, kh, vh)));
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim}).elementwise_affine(false)));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim}).elementwise_affine(false)));
  attn = register_module("attn", SelfAttention(dim, heads));
  fc1 = register_module("fc1", LoraLinear(dim, dim * mlp_ratio));
  fc2 = register_module("fc2", LoraLinear(dim * mlp_ratio, dim));
  ada = register_module("ada", nn::Linear(dim, 4 * dim));
  torch::NoGradGuard no_grad;
  ada->weight.zero_();
  ada->bias.zero_();
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& modulation) {
  const auto mods = modulation.chunk(4, -1);
  auto h = x + attn->forward(modulate(norm1->forward(x), mods[0], mods[1]));
  const auto m = modulate(norm2->forward(h), mods[2], mods[3]);
  return h + fc2->forward(torch::gelu(fc1->forward(m)));
}

// ---------------------------------------------------------------------------

VelocityNetImpl::VelocityNetImpl(NetConfig config) : config_(config) {
  const int64_t d = config_.dim;
  if (config_.height % config_.patch != 0 || config_.width % config_.patch != 0) {
    throw std::invalid_argument("velocity net: resolution not divisible by patch");
  }
  embed = register_module("embed", nn::Linear(config_.patch_dim(2 * config_.channels + 1), d));
  spatial_pos = register_parameter("spatial_pos",
                                   0.02 * torch::randn({config_.patches_per_frame(), d}));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(d, d), nn::SiLU(), nn::Linear(d, d)));
  shape_embed = register_module("shape_embed", nn::Embedding(config_.shape_classes, d));
  color_embed = register_module("color_embed", nn::Embedding(config_.colors, d));
  blocks = register_module("blocks", nn::ModuleList());
  for (int64_t i = 0; i < config_.depth; ++i) {
    TransformerBlock block(d, config_.heads, config_.mlp_ratio);
    blocks->push_back(block);
    block_refs_.push_back(block);
  }
  final_norm = register_module("final_norm",
                               nn::LayerNorm(nn::LayerNormOptions({d}).elementwise_affine(false)));
  final_ada = register_module("final_ada", nn::Linear(d, 2 * d));
  head = register_module("head", nn::Linear(d, config_.patch_dim(config_.channels)));
  torch::NoGradGuard no_grad;
  final_ada->weight.zero_();
  final_ada->bias.zero_();
  shape_embed->weight.mul_(0.1);
  color_embed->weight.mul_(0.1);
}

torch::Tensor VelocityNetImpl::condition_embedding(const torch::Tensor& t, const torch::Tensor& attrs) {
  const auto a = attrs.to(torch::kInt64);
  return time_mlp->forward(timestep_embedding(t, config_.dim).to(embed->weight.dtype())) +
         shape_embed->forward(a.select(1, 0)) + color_embed->forward(a.select(1, 1));
}

torch::Tensor VelocityNetImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t,
                                       const Condition& cond, std::vector<torch::Tensor>* features) {
  if (x_t.dim() != 5) throw std::invalid_argument("velocity net: expected (B, F, C, H, W) input");
  const int64_t B = x_t.size(0), F = x_t.size(1);
  if (x_t.size(2) != config_.channels || x_t.size(3) != config_.height ||
      x_t.size(4) != config_.width) {
    throw std::invalid_argument("velocity net: input frame shape does not match the config");
  }
  if (cond.frames.sizes() != x_t.sizes()) {
    throw std::invalid_argument("velocity net: conditioning frames do not match input shape");
  }
  const auto levels = t.dim() == 0 ? t.expand({B}) : t;
  const auto mask = cond.mask.to(x_t.dtype()).reshape({1, F, 1, 1, 1}).expand(
      {B, F, 1, config_.height, config_.width});
  const auto input = torch::cat({x_t, cond.frames.to(x_t.dtype()), mask}, 2);

  auto h = embed->forward(patchify(input, config_.patch));
  const auto frame_pos = timestep_embedding(torch::arange(F, x_t.options()), config_.dim, 1.0);
  const auto pos = (spatial_pos.unsqueeze(0) + frame_pos.unsqueeze(1)).reshape({F * config_.patches_per_frame(), config_.dim});
  h = h + pos.unsqueeze(0);

  const auto c = torch::silu(condition_embedding(levels, cond.attrs));
  for (auto& block : block_refs_) {
    h = block->forward(h, block->ada->forward(c));
    if (features != nullptr) features->push_back(h);
  }
  const auto mods = final_ada->forward(c).chunk(2, -1);
  const auto out = head->forward(modulate(final_norm->forward(h), mods[0], mods[1]));
  return unpatchify(out, F, config_.channels, config_.height, config_.width, config_.patch);
}

std::vector<LoraLinear> VelocityNetImpl::lora_layers() const {
  std::vector<LoraLinear> layers;
  for (const auto& block : block_refs_) {
    layers.push_back(block->attn->q);
    layers.push_back(block->attn->k);
    layers.push_back(block->attn->v);
    layers.push_back(block->attn->out);
    layers.push_back(block->fc1);
    layers.push_back(block->fc2);
  }
  return layers;
}

void VelocityNetImpl::set_lora(int64_t rank, double alpha) {
  for (auto& layer : lora_layers()) layer->attach(rank, alpha);
  lora_rank_ = rank;
  lora_alpha_ = alpha;
}

VelocityField as_field(VelocityNet net) {
  return [net](const torch::Tensor& x, const torch::Tensor& t, const Condition& cond) mutable {
    return net->forward(x, t, cond);
  };
}

// ---------------------------------------------------------------------------

void copy_parameters(const nn::Module& src, nn::Module& dst) {
  const auto from = src.named_parameters();
  torch::NoGradGuard no_grad;
  for (auto& item : dst.named_parameters()) {
    const auto* found = from.find(item.key());
    if (found == nullptr) {
      throw std::invalid_argument("copy_parameters: source has no parameter '" + item.key() + "'");
    }
    item.value().copy_(*found);
  }
}

void set_requires_grad(nn::Module& module, bool flag) {
  for (auto& p : module.parameters()) p.set_requires_grad(flag);
}

std::vector<torch::Tensor> trainable_parameters(const nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) out.push_back(p);
  }
  return out;
}

int64_t count_parameters(const std::vector<torch::Tensor>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

uint64_t tensor_digest(const std::vector<torch::Tensor>& tensors) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    const auto c = t.detach().contiguous().cpu();
    const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
    const auto n = static_cast<size_t>(c.numel()) * c.element_size();
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

uint64_t parameter_digest(const nn::Module& module) { return tensor_digest(module.parameters()); }

VelocityNet clone_net(const VelocityNet& net) {
  VelocityNet copy(net->config());
  if (net->lora_rank() > 0) copy->set_lora(net->lora_rank(), net->lora_alpha());
  copy_parameters(*net, *copy);
  const auto src = net->named_parameters();
  for (auto& item : copy->named_parameters()) {
    item.value().set_requires_grad(src[item.key()].requires_grad());
  }
  copy->to(net->embed->weight.scalar_type());
  return copy;
}

VelocityNet lora_attach(const VelocityNet& base, int64_t rank, double alpha) {
  if (base->lora_rank() > 0) throw std::invalid_argument("lora_attach: base already adapted");
  auto adapted = clone_net(base);
  adapted->set_lora(rank, alpha);
  for (auto& item : adapted->named_parameters()) {
    const bool is_adapter = item.key().find("lora_") != std::string::npos;
    item.value().set_requires_grad(is_adapter);
  }
  return adapted;
}

// ---------------------------------------------------------------------------

EmaShadow::EmaShadow(std::vector<torch::Tensor> shadow, double decay)
    : shadow_(std::move(shadow)), decay_(decay) {
  if (decay_ < 0.0 || decay_ > 1.0) throw std::invalid_argument("ema: decay must be in [0, 1]");
}

void EmaShadow::update(const std::vector<torch::Tensor>& live) {
  if (live.size() != shadow_.size()) throw std::invalid_argument("ema: parameter count mismatch");
  for (size_t i = 0; i < live.size(); ++i) {
    if (live[i].sizes() != shadow_[i].sizes()) throw std::invalid_argument("ema: shape mismatch");
  }
  torch::NoGradGuard no_grad;
  const double weight = 1.0 - decay_;
  for (size_t i = 0; i < live.size(); ++i) {
    // lerp keeps the fixed point exact: shadow == live stays unchanged.
    shadow_[i].lerp_(live[i].detach(), weight);
  }
}

void ema_update(EmaShadow& shadow, const std::vector<torch::Tensor>& live) { shadow.update(live); }

EmaBackbone EmaBackbone::create(const VelocityNet& generator, double decay) {
  auto net = clone_net(generator);
  set_requires_grad(*net, false);
  return EmaBackbone{net, EmaShadow(net->parameters(), decay)};
}

void backbone_refresh(const VelocityNet& generator, EmaBackbone& backbone) {
  backbone.ema.update(generator->parameters());
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{{"dim", c.dim},       {"queries", c.queries}, {"layers", c.layers},
                     {"heads", c.heads},   {"patch", c.patch},     {"channels", c.channels},
                     {"height", c.height}, {"width", c.width},     {"shape_classes", c.shape_classes},
                     {"colors", c.colors}};
}

void from_json(const nlohmann::json& j, HeadConfig& c) {
  HeadConfig d;
  c.dim = j.value("dim", d.dim);
  c.queries = j.value("queries", d.queries);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.patch = j.value("patch", d.patch);
  c.channels = j.value("channels", d.channels);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.shape_classes = j.value("shape_classes", d.shape_classes);
  c.colors = j.value("colors", d.colors);
}

HeadConfig HeadConfig::from_net(const NetConfig& net, int64_t queries) {
  HeadConfig c;
  c.dim = net.dim;
  c.queries = queries;
  c.layers = net.depth;
  c.heads = net.heads;
  c.patch = net.patch;
  c.channels = net.channels;
  c.height = net.height;
  c.width = net.width;
  c.shape_classes = net.shape_classes;
  c.colors = net.colors;
  return c;
}

CrossAttentionImpl::CrossAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
  q = register_module("q", nn::Linear(dim, dim));
  k = register_module("k", nn::Linear(dim, dim));
  v = register_module("v", nn::Linear(dim, dim));
  out = register_module("out", nn::Linear(dim, dim));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& queries, const torch::Tensor& context) {
  const auto qh = split_heads(q->forward(queries), heads_);
  const auto kh = split_heads(k->forward(context), heads_);
  const auto vh = split_heads(v->forward(context), heads_);
  return out->forward(merge_heads(attend(qh, kh, vh)));
}

namespace {

nn::Sequential make_mlp(int64_t dim) {
  return nn::Sequential(nn::Linear(dim, 4 * dim), nn::GELU(), nn::Linear(4 * dim, dim));
}

}  // namespace

SemanticHead::SemanticHead(HeadConfig config) : config_(config) {
  const int64_t d = config_.dim, s = config_.cond_tokens();
  if (config_.queries < 1 || config_.layers < 1) {
    throw std::invalid_argument("semantic head: need at least one query and one layer");
  }
  q_logits = register_parameter("q_logits", 0.02 * torch::randn({config_.queries, d}));
  modality = register_parameter("modality", 0.02 * torch::randn({2, d}));
  cond_pos = register_parameter("cond_pos", 0.02 * torch::randn({s, d}));
  frame_embed = register_module("frame_embed", nn::Linear(config_.channels * config_.patch * config_.patch, d));
  shape_embed = register_module("shape_embed", nn::Embedding(config_.shape_classes, d));
  color_embed = register_module("color_embed", nn::Embedding(config_.colors, d));
  attr_tokens = register_module("attr_tokens", nn::Linear(d, s * d));
  fuse_norm1 = register_module("fuse_norm1", nn::LayerNorm(nn::LayerNormOptions({d})));
  fuse_norm2 = register_module("fuse_norm2", nn::LayerNorm(nn::LayerNormOptions({d})));
  fuse_attn = register_module("fuse_attn", SelfAttention(d, config_.heads));
  fuse_mlp = register_module("fuse_mlp", make_mlp(d));
  level_proj = register_module("level_proj", nn::ModuleList());
  query_norm = register_module("query_norm", nn::ModuleList());
  feature_norm = register_module("feature_norm", nn::ModuleList());
  cross = register_module("cross", nn::ModuleList());
  cross_mlp = register_module("cross_mlp", nn::ModuleList());
  for (int64_t l = 0; l < config_.layers; ++l) {
    level_proj->push_back(nn::Linear(d, d));
    query_norm->push_back(nn::LayerNorm(nn::LayerNormOptions({d})));
    feature_norm->push_back(nn::LayerNorm(nn::LayerNormOptions({d})));
    cross->push_back(CrossAttention(d, config_.heads));
    cross_mlp->push_back(make_mlp(d));
  }
  project = register_module("project", nn::Linear(config_.queries * config_.layers * d, 1));
}

torch::Tensor SemanticHead::logits(const std::vector<torch::Tensor>& features, const torch::Tensor& t,
                                   const Condition& cond, int64_t /*frames*/) {
  if (static_cast<int64_t>(features.size()) != config_.layers) {
    throw std::invalid_argument("semantic head: feature tap count does not match head layers");
  }
  const int64_t B = features.front().size(0), d = config_.dim, s = config_.cond_tokens();
  const auto dtype = q_logits.scalar_type();
  const auto first = cond.frames.select(1, 0).unsqueeze(1).to(dtype);
  const auto e_i = frame_embed->forward(patchify(first, config_.patch)) + cond_pos.unsqueeze(0) +
                   modality[0].reshape({1, 1, d});
  const auto a = cond.attrs.to(torch::kInt64);
  const auto attr = shape_embed->forward(a.select(1, 0)) + color_embed->forward(a.select(1, 1));
  const auto e_t = attr_tokens->forward(attr).reshape({B, s, d}) + modality[1].reshape({1, 1, d});

  auto tokens = torch::cat({q_logits.unsqueeze(0).expand({B, config_.queries, d}), e_i, e_t}, 1);
  tokens = tokens + fuse_attn->forward(fuse_norm1->forward(tokens));
  tokens = tokens + fuse_mlp->forward(fuse_norm2->forward(tokens));
  const auto fused = tokens.slice(1, 0, config_.queries);

  const auto levels = t.dim() == 0 ? t.expand({B}) : t;
  const auto temb = timestep_embedding(levels, d).to(dtype);
  std::vector<torch::Tensor> processed;
  for (int64_t l = 0; l < config_.layers; ++l) {
    const auto idx = static_cast<size_t>(l);
    auto q = fused + level_proj[idx]->as<nn::Linear>()->forward(temb).unsqueeze(1);
    const auto ctx = feature_norm[idx]->as<nn::LayerNorm>()->forward(features[idx]);
    q = q + cross[idx]->as<CrossAttention>()->forward(query_norm[idx]->as<nn::LayerNorm>()->forward(q), ctx);
    q = q + cross_mlp[idx]->as<nn::Sequential>()->forward(q);
    processed.push_back(q);
  }
  const auto stacked = torch::cat(processed, -1).flatten(1);
  return project->forward(stacked).squeeze(-1);
}

ConvHead::ConvHead(HeadConfig config) : config_(config) {
  const int64_t hidden = std::max<int64_t>(8, config_.dim / 2);
  convs = register_module("convs", nn::ModuleList());
  for (int64_t l = 0; l < config_.layers; ++l) {
    convs->push_back(nn::Conv3d(nn::Conv3dOptions(config_.dim, hidden, 3).padding(1)));
  }
  project = register_module("project", nn::Linear(hidden * config_.layers, 1));
}

torch::Tensor ConvHead::logits(const std::vector<torch::Tensor>& features, const torch::Tensor& /*t*/,
                               const Condition& /*cond*/, int64_t frames) {
  if (static_cast<int64_t>(features.size()) != config_.layers) {
    throw std::invalid_argument("conv head: feature tap count does not match head layers");
  }
  const int64_t gh = config_.height / config_.patch, gw = config_.width / config_.patch;
  std::vector<torch::Tensor> pooled;
  for (size_t l = 0; l < features.size(); ++l) {
    const int64_t B = features[l].size(0);
    const auto grid = features[l].reshape({B, frames, gh, gw, config_.dim}).permute({0, 4, 1, 2, 3});
    const auto h = torch::leaky_relu(convs[l]->as<nn::Conv3d>()->forward(grid), 0.2);
    pooled.push_back(h.mean({2, 3, 4}));
  }
  return project->forward(torch::cat(pooled, -1)).squeeze(-1);
}

torch::Tensor discriminator_forward(VelocityNet& backbone, DiscriminatorHead& head,
                                    const torch::Tensor& x_t, const torch::Tensor& t,
                                    const Condition& cond) {
  std::vector<torch::Tensor> features;
  backbone->forward(x_t, t, cond, &features);
  if (static_cast<int64_t>(features.size()) != head.expected_layers()) {
    throw std::invalid_argument("discriminator: missing feature taps");
  }
  return head.logits(features, t, cond, x_t.size(1));
}

// ---------------------------------------------------------------------------

fs::path checkpoint_weights(const fs::path& stem) { return fs::path(stem.string() + ".pt"); }
fs::path checkpoint_sidecar(const fs::path& stem) { return fs::path(stem.string() + ".json"); }

bool checkpoint_exists(const fs::path& stem) {
  return fs::exists(checkpoint_weights(stem)) && fs::exists(checkpoint_sidecar(stem));
}

void save_checkpoint(const fs::path& stem, const VelocityNet& net, const CheckpointMeta& meta) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  torch::save(net, checkpoint_weights(stem).string());
  const nlohmann::json sidecar{{"architecture", net->config()},
                               {"lora", {{"rank", net->lora_rank()}, {"alpha", net->lora_alpha()}}},
                               {"role", meta.role},
                               {"tag", meta.tag},
                               {"step", meta.step},
                               {"seed", meta.seed}};
  std::ofstream(checkpoint_sidecar(stem)) << sidecar.dump(2) << "\n";
}

VelocityNet load_checkpoint(const fs::path& stem, CheckpointMeta* meta) {
  std::ifstream in(checkpoint_sidecar(stem));
  if (!in || !fs::exists(checkpoint_weights(stem))) {
    throw std::runtime_error("checkpoint not found: " + stem.string());
  }
  const auto sidecar = nlohmann::json::parse(in);
  VelocityNet net(sidecar.at("architecture").get<NetConfig>());
  const auto rank = sidecar.at("lora").at("rank").get<int64_t>();
  if (rank > 0) net->set_lora(rank, sidecar.at("lora").at("alpha").get<double>());
  torch::load(net, checkpoint_weights(stem).string());
  if (meta != nullptr) {
    meta->role = sidecar.value("role", std::string());
    meta->tag = sidecar.value("tag", std::string());
    meta->step = sidecar.value("step", int64_t{0});
    meta->seed = sidecar.value("seed", uint64_t{0});
  }
  return net;
}

}  // namespace pose
