#pragma once

// Networks shared by every role: a small space-time transformer velocity
// predictor (teacher, generator, fake model, discriminator backbone), low-rank
// adapters, EMA shadows and the discriminator heads.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "pose/flow.hpp"

namespace pose {

struct NetConfig {
  int64_t channels = 1;
  int64_t height = 16;
  int64_t width = 16;
  int64_t patch = 2;
  int64_t dim = 64;
  int64_t depth = 4;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t shape_classes = 4;
  int64_t colors = 2;

  int64_t grid_h() const { return height / patch; }
  int64_t grid_w() const { return width / patch; }
  int64_t patches_per_frame() const { return grid_h() * grid_w(); }
  int64_t patch_dim(int64_t in_channels) const { return in_channels * patch * patch; }
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

// Sinusoidal embedding of a (B) level tensor, returns (B, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double scale = 1000.0);

// (B, F, C, H, W) -> (B, F * gh * gw, C * p * p) and back.
torch::Tensor patchify(const torch::Tensor& x, int64_t patch);
torch::Tensor unpatchify(const torch::Tensor& tokens, int64_t frames, int64_t channels,
                         int64_t height, int64_t width, int64_t patch);

// Linear layer with an optional low-rank delta W + (alpha / r) B A.
class LoraLinearImpl : public torch::nn::Module {
 public:
  LoraLinearImpl(int64_t in_features, int64_t out_features, bool bias = true);

  torch::Tensor forward(const torch::Tensor& x);

  // B starts at zero so the adapted layer reproduces the base layer.
  void attach(int64_t rank, double alpha);
  bool adapted() const { return rank_ > 0; }
  int64_t rank() const { return rank_; }
  double scale() const { return scale_; }
  void freeze_base();
  // W + (alpha / r) B A, or W when not adapted.
  torch::Tensor effective_weight() const;

  torch::nn::Linear base{nullptr};
  torch::Tensor lora_a;
  torch::Tensor lora_b;

 private:
  int64_t in_features_;
  int64_t out_features_;
  int64_t rank_ = 0;
  double scale_ = 0.0;
};
TORCH_MODULE(LoraLinear);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);
  LoraLinear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(SelfAttention);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio);
  // `modulation` is (B, 4 * dim): shift/scale pairs for the two sublayers.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& modulation);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  SelfAttention attn{nullptr};
  LoraLinear fc1{nullptr}, fc2{nullptr};
  torch::nn::Linear ada{nullptr};
};
TORCH_MODULE(TransformerBlock);

// Velocity predictor mu(x_t, t, condition). Input channels are the noisy
// frames, the conditioning frames and a binary mask channel; attention is
// joint over all space-time tokens.
class VelocityNetImpl : public torch::nn::Module {
 public:
  explicit VelocityNetImpl(NetConfig config);

  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const Condition& cond,
                        std::vector<torch::Tensor>* features = nullptr);

  // Noise-level plus attribute embedding, (B, dim).
  torch::Tensor condition_embedding(const torch::Tensor& t, const torch::Tensor& attrs);

  const NetConfig& config() const { return config_; }
  std::vector<LoraLinear> lora_layers() const;
  int64_t lora_rank() const { return lora_rank_; }
  double lora_alpha() const { return lora_alpha_; }
  void set_lora(int64_t rank, double alpha);

  torch::nn::Linear embed{nullptr};
  torch::Tensor spatial_pos;
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Embedding shape_embed{nullptr}, color_embed{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear final_ada{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  NetConfig config_;
  std::vector<TransformerBlock> block_refs_;
  int64_t lora_rank_ = 0;
  double lora_alpha_ = 0.0;
};
TORCH_MODULE(VelocityNet);

VelocityField as_field(VelocityNet net);

// Fresh network with the same architecture (and adapters) holding copies of
// the parameters.
VelocityNet clone_net(const VelocityNet& net);
void copy_parameters(const torch::nn::Module& src, torch::nn::Module& dst);
void set_requires_grad(torch::nn::Module& module, bool flag);
std::vector<torch::Tensor> trainable_parameters(const torch::nn::Module& module);
int64_t count_parameters(const std::vector<torch::Tensor>& params);
// Exact byte-level digest of all parameters, for immutability checks.
uint64_t parameter_digest(const torch::nn::Module& module);
uint64_t tensor_digest(const std::vector<torch::Tensor>& tensors);

// Copy of `base` with adapters on every attention and feed-forward projection.
// Base weights are frozen; only the adapter factors train.
VelocityNet lora_attach(const VelocityNet& base, int64_t rank, double alpha);

// Exponential moving average over a parameter set. The shadow tensors may be
// the parameters of a live module, which then tracks the average in place.
class EmaShadow {
 public:
  EmaShadow(std::vector<torch::Tensor> shadow, double decay);

  // shadow <- decay * shadow + (1 - decay) * live, per tensor.
  void update(const std::vector<torch::Tensor>& live);
  const std::vector<torch::Tensor>& tensors() const { return shadow_; }
  double decay() const { return decay_; }

 private:
  std::vector<torch::Tensor> shadow_;
  double decay_;
};

void ema_update(EmaShadow& shadow, const std::vector<torch::Tensor>& live);

// Shadow network tracking `generator` through an EMA over its parameters.
struct EmaBackbone {
  VelocityNet net{nullptr};
  EmaShadow ema;

  static EmaBackbone create(const VelocityNet& generator, double decay);
};

// theta_minus <- EMA(theta). The backbone is never optimised directly.
void backbone_refresh(const VelocityNet& generator, EmaBackbone& backbone);

// Discriminator heads consume per-block backbone features.
class DiscriminatorHead : public torch::nn::Module {
 public:
  virtual torch::Tensor logits(const std::vector<torch::Tensor>& features, const torch::Tensor& t,
                               const Condition& cond, int64_t frames) = 0;
  virtual int64_t expected_layers() const = 0;
  virtual torch::Tensor final_weight() = 0;
  virtual torch::Tensor final_bias() = 0;
};

struct HeadConfig {
  int64_t dim = 64;
  int64_t queries = 16;
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t patch = 2;
  int64_t channels = 1;
  int64_t height = 16;
  int64_t width = 16;
  int64_t shape_classes = 4;
  int64_t colors = 2;

  static HeadConfig from_net(const NetConfig& net, int64_t queries);
  int64_t cond_tokens() const { return (height / patch) * (width / patch); }
};

void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);

class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& queries, const torch::Tensor& context);
  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(CrossAttention);

// Learnable logit queries fused with condition-frame and attribute tokens,
// cross-attended against every backbone layer, concatenated channel-wise and
// projected to one logit.
class SemanticHead : public DiscriminatorHead {
 public:
  explicit SemanticHead(HeadConfig config);

  torch::Tensor logits(const std::vector<torch::Tensor>& features, const torch::Tensor& t,
                       const Condition& cond, int64_t frames) override;
  int64_t expected_layers() const override { return config_.layers; }
  torch::Tensor final_weight() override { return project->weight; }
  torch::Tensor final_bias() override { return project->bias; }
  const HeadConfig& config() const { return config_; }

  torch::Tensor q_logits;
  torch::Tensor modality;  // (2, dim): index 0 condition frame, 1 attributes
  torch::Tensor cond_pos;
  torch::nn::Linear frame_embed{nullptr};
  torch::nn::Embedding shape_embed{nullptr}, color_embed{nullptr};
  torch::nn::Linear attr_tokens{nullptr};
  torch::nn::LayerNorm fuse_norm1{nullptr}, fuse_norm2{nullptr};
  SelfAttention fuse_attn{nullptr};
  torch::nn::Sequential fuse_mlp{nullptr};
  torch::nn::ModuleList level_proj{nullptr};
  torch::nn::ModuleList query_norm{nullptr};
  torch::nn::ModuleList feature_norm{nullptr};
  torch::nn::ModuleList cross{nullptr};
  torch::nn::ModuleList cross_mlp{nullptr};
  torch::nn::Linear project{nullptr};

 private:
  HeadConfig config_;
};

// Small 3-D convolutional head used by the adversarial baselines.
class ConvHead : public DiscriminatorHead {
 public:
  explicit ConvHead(HeadConfig config);

  torch::Tensor logits(const std::vector<torch::Tensor>& features, const torch::Tensor& t,
                       const Condition& cond, int64_t frames) override;
  int64_t expected_layers() const override { return config_.layers; }
  torch::Tensor final_weight() override { return project->weight; }
  torch::Tensor final_bias() override { return project->bias; }

  torch::nn::ModuleList convs{nullptr};
  torch::nn::Linear project{nullptr};

 private:
  HeadConfig config_;
};

// Runs the backbone with feature taps and applies the head. Returns (B) logits.
torch::Tensor discriminator_forward(VelocityNet& backbone, DiscriminatorHead& head,
                                    const torch::Tensor& x_t, const torch::Tensor& t,
                                    const Condition& cond);

// Checkpoint = <stem>.pt (parameters) + <stem>.json (architecture and metadata).
struct CheckpointMeta {
  std::string role;  // teacher, generator, fake, ...
  std::string tag;   // teacher, phase1, phase2, lcm, add, dmd2, ...
  int64_t step = 0;
  uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& stem, const VelocityNet& net,
                     const CheckpointMeta& meta);
VelocityNet load_checkpoint(const std::filesystem::path& stem, CheckpointMeta* meta = nullptr);
std::filesystem::path checkpoint_weights(const std::filesystem::path& stem);
std::filesystem::path checkpoint_sidecar(const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);

}  // namespace pose
