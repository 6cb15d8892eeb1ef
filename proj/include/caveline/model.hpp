#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "caveline/data.hpp"
#include "json.hpp"

namespace caveline {

enum class Variant { kLight, kBase };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& text);

// Architecture hyperparameters. Defaults describe the full-size LIGHT model.
struct ModelConfig {
  Variant variant = Variant::kLight;
  int backbone_channels = 48;  // N, the feature width handed to the refiner
  int patch_size = 16;
  int attn_layers = 4;
  int attn_heads = 8;
  int embed_dim = 256;
  int mlp_ratio = 2;
  int input_width = kWorkingWidth;
  int input_height = kWorkingHeight;
  // Scales every backbone width (and N) for reduced "micro" models used in
  // tests; 1.0 is the full architecture.
  double width_multiplier = 1.0;
  // BASE only: compound-scaling coefficients applied to the B0 stage table.
  double base_width_coefficient = 1.6;
  double base_depth_coefficient = 2.2;
  bool zero_init_head = false;
  std::uint64_t seed = 0;

  static ModelConfig light();
  static ModelConfig base();
  /// Same block structure as `variant`, reduced widths and a small raster.
  static ModelConfig micro(Variant variant, int width, int height);

  int feature_width() const { return (input_width + 1) / 2; }
  int feature_height() const { return (input_height + 1) / 2; }
  int token_count() const;
  /// N implied by variant and width multiplier (48 / 128 at full width).
  int expected_backbone_channels() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& doc);

int make_divisible(double value, int divisor = 8);

// ---------------------------------------------------------------------------
// Building blocks

struct ConvBnActImpl : torch::nn::Module {
  enum class Act { kNone, kReLU, kHardswish, kSiLU };
  ConvBnActImpl(int in, int out, int kernel, int stride, int groups, Act act);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
  Act act;
};
TORCH_MODULE(ConvBnAct);

struct SqueezeExciteImpl : torch::nn::Module {
  SqueezeExciteImpl(int channels, int reduced, bool hard_gate);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::Conv2d reduce{nullptr}, expand{nullptr};
  bool hard_gate;
};
TORCH_MODULE(SqueezeExcite);

/// Inverted residual bottleneck (MobileNetV3 "bneck" / EfficientNet MBConv).
struct InvertedResidualImpl : torch::nn::Module {
  struct Options {
    int in = 0, expanded = 0, out = 0, kernel = 3, stride = 1;
    bool squeeze_excite = false;
    int se_reduced = 0;
    bool hard_gate = true;
    ConvBnActImpl::Act act = ConvBnActImpl::Act::kReLU;
  };
  explicit InvertedResidualImpl(const Options& opts);
  torch::Tensor forward(torch::Tensor x);

  ConvBnAct expand{nullptr}, depthwise{nullptr}, project{nullptr};
  SqueezeExcite se{nullptr};
  bool use_residual;
};
TORCH_MODULE(InvertedResidual);

/// Upsamples to the skip tensor's size (when given), concatenates, convolves.
struct DecoderBlockImpl : torch::nn::Module {
  DecoderBlockImpl(int in, int skip, int out, bool separable);
  torch::Tensor forward(torch::Tensor x, torch::Tensor skip = {});

  torch::nn::Sequential body{nullptr};
  bool has_skip;
};
TORCH_MODULE(DecoderBlock);

/// Hierarchical encoder-decoder mapping B×3×H×W to B×N×ceil(H/2)×ceil(W/2).
class Backbone : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(torch::Tensor x) = 0;
  virtual int out_channels() const = 0;
};

/// 16-filter stem, 15 bottlenecks, six-block mirrored decoder.
class MobileNetBackbone : public Backbone {
 public:
  explicit MobileNetBackbone(const ModelConfig& config);
  torch::Tensor forward(torch::Tensor x) override;
  int out_channels() const override { return out_channels_; }

 private:
  ConvBnAct stem_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  std::vector<std::size_t> taps_;  // block indices whose outputs feed the decoder
  std::vector<DecoderBlock> decoder_;
  int out_channels_;
};

/// Compound-scaled MBConv encoder with the same six-block decoder shape.
class EfficientBackbone : public Backbone {
 public:
  explicit EfficientBackbone(const ModelConfig& config);
  torch::Tensor forward(torch::Tensor x) override;
  int out_channels() const override { return out_channels_; }

 private:
  ConvBnAct stem_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  std::vector<std::size_t> taps_;
  std::vector<DecoderBlock> decoder_;
  int out_channels_;
};

struct MultiHeadSelfAttentionImpl : torch::nn::Module {
  MultiHeadSelfAttentionImpl(int embed_dim, int heads);
  /// tokens: B×T×D
  torch::Tensor forward(torch::Tensor tokens);

  torch::nn::Linear query{nullptr}, key{nullptr}, value{nullptr}, output{nullptr};
  int heads;
};
TORCH_MODULE(MultiHeadSelfAttention);

// Pre-norm transformer encoder layer.
struct TransformerLayerImpl : torch::nn::Module {
  TransformerLayerImpl(int embed_dim, int heads, int mlp_hidden);
  torch::Tensor forward(torch::Tensor tokens);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  MultiHeadSelfAttention attention{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerLayer);

/// Global-context refinement of backbone features.
///
/// Features are zero-padded to a multiple of the patch size, patch-embedded
/// with a strided convolution, offset by learned position embeddings and
/// passed through the attention stack. The first N output tokens are kept and
/// projected onto the normalized, 3×3-convolved feature map by a per-pixel dot
/// product, giving N refined maps at the input feature resolution.
struct ViTRefinerImpl : torch::nn::Module {
  explicit ViTRefinerImpl(const ModelConfig& config);
  /// features: B×N×h×w (NCHW) -> B×N×h×w
  torch::Tensor forward(torch::Tensor features);

  torch::nn::Conv2d patch_embed{nullptr};
  torch::Tensor position_embedding;
  torch::nn::ModuleList layers{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear token_projection{nullptr};
  torch::nn::BatchNorm2d feature_norm{nullptr};
  torch::nn::Conv2d feature_conv{nullptr};
  int channels, patch, feature_h, feature_w;
};
TORCH_MODULE(ViTRefiner);

struct CaveLineNetImpl : torch::nn::Module {
  explicit CaveLineNetImpl(const ModelConfig& config);
  /// images: B×3×H×W in [0,1]; returns logits B×1×H×W.
  torch::Tensor forward(torch::Tensor images);
  torch::Tensor probabilities(torch::Tensor images) { return torch::sigmoid(forward(images)); }

  ModelConfig config;
  std::shared_ptr<Backbone> backbone;
  ViTRefiner refiner{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(CaveLineNet);

/// Validates `config`, seeds torch from `config.seed` and constructs the net.
CaveLineNet build_model(const ModelConfig& config);

std::int64_t count_parameters(const torch::nn::Module& module);

struct PredictionBatch {
  torch::Tensor probs;  // B×H×W float in [0,1]
  std::vector<std::string> sample_ids;
};

/// Inference on a B×H×W×3 batch with values in [0,1]. Switches the model to
/// eval mode; outputs are deterministic.
PredictionBatch predict(CaveLineNet& model, const torch::Tensor& batch_nhwc,
                        std::vector<std::string> sample_ids = {});
/// Single image (CV_32FC3 RGB) to a CV_32FC1 probability map.
cv::Mat predict_image(CaveLineNet& model, const cv::Mat& rgb01);

torch::Tensor image_to_tensor(const cv::Mat& rgb01);  // 3×H×W
torch::Tensor mask_to_tensor(const cv::Mat& mask01);  // H×W float
cv::Mat tensor_to_prob(const torch::Tensor& hw);

// Checkpoints: versioned binary container of config + named float32 tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(CaveLineNet& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  ModelConfig config;
  CaveLineNet model{nullptr};
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
/// Copies tensors from `path` into an existing model of matching config.
void load_weights(CaveLineNet& model, const std::filesystem::path& path);

}  // namespace caveline
