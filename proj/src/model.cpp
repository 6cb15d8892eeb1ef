#include "caveline/model.hpp"

#include <cmath>
#include <cstring>

#include "caveline/error.hpp"

namespace caveline {

namespace F = torch::nn::functional;
using nlohmann::json;
using Act = ConvBnActImpl::Act;

std::string to_string(Variant variant) { return variant == Variant::kLight ? "light" : "base"; }

Variant parse_variant(const std::string& text) {
  if (text == "light" || text == "LIGHT") return Variant::kLight;
  if (text == "base" || text == "BASE") return Variant::kBase;
  throw Error(ErrorCode::kInvalidConfig, "unknown model variant '" + text + "'");
}

int make_divisible(double value, int divisor) {
  int rounded = std::max(divisor, static_cast<int>(value + divisor / 2.0) / divisor * divisor);
  if (rounded < 0.9 * value) rounded += divisor;
  return rounded;
}

ModelConfig ModelConfig::light() { return ModelConfig{}; }

ModelConfig ModelConfig::base() {
  ModelConfig config;
  config.variant = Variant::kBase;
  config.backbone_channels = 128;
  return config;
}

ModelConfig ModelConfig::micro(Variant variant, int width, int height) {
  ModelConfig config = variant == Variant::kLight ? light() : base();
  config.width_multiplier = 0.25;
  config.base_depth_coefficient = 1.0;
  config.input_width = width;
  config.input_height = height;
  config.embed_dim = 32;
  config.attn_heads = 4;
  config.patch_size = 4;
  config.backbone_channels = config.expected_backbone_channels();
  return config;
}

int ModelConfig::token_count() const {
  if (patch_size < 1) return 0;
  const int rows = (feature_height() + patch_size - 1) / patch_size;
  const int cols = (feature_width() + patch_size - 1) / patch_size;
  return rows * cols;
}

int ModelConfig::expected_backbone_channels() const {
  const double full = variant == Variant::kLight ? 48.0 : 128.0;
  return std::max(4, static_cast<int>(std::lround(full * width_multiplier / 4.0)) * 4);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0)) fail("width_multiplier must lie in (0,1]");
  if (backbone_channels != expected_backbone_channels()) {
    fail("backbone_channels must be " + std::to_string(expected_backbone_channels()) + " for the " +
         to_string(variant) + " variant at this width");
  }
  if (patch_size < 1) fail("patch_size must be >= 1");
  if (attn_layers < 1) fail("attn_layers must be >= 1");
  if (attn_heads < 1 || embed_dim < 1 || embed_dim % attn_heads != 0) {
    fail("embed_dim must be a positive multiple of attn_heads");
  }
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (input_width < 16 || input_height < 16) fail("input raster must be at least 16x16");
  if (token_count() < backbone_channels) {
    fail("refiner needs at least N=" + std::to_string(backbone_channels) + " tokens, got " +
         std::to_string(token_count()));
  }
  if (base_width_coefficient <= 0.0 || base_depth_coefficient <= 0.0) fail("compound coefficients must be positive");
}

json to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"backbone_channels", c.backbone_channels},
          {"patch_size", c.patch_size},
          {"attn_layers", c.attn_layers},
          {"attn_heads", c.attn_heads},
          {"embed_dim", c.embed_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"input_size", {c.input_width, c.input_height}},
          {"width_multiplier", c.width_multiplier},
          {"base_width_coefficient", c.base_width_coefficient},
          {"base_depth_coefficient", c.base_depth_coefficient},
          {"zero_init_head", c.zero_init_head},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& doc) {
  ModelConfig c;
  try {
    if (doc.contains("variant")) {
      c = parse_variant(doc["variant"].get<std::string>()) == Variant::kLight ? ModelConfig::light()
                                                                               : ModelConfig::base();
    }
    c.backbone_channels = doc.value("backbone_channels", c.backbone_channels);
    c.patch_size = doc.value("patch_size", c.patch_size);
    c.attn_layers = doc.value("attn_layers", c.attn_layers);
    c.attn_heads = doc.value("attn_heads", c.attn_heads);
    c.embed_dim = doc.value("embed_dim", c.embed_dim);
    c.mlp_ratio = doc.value("mlp_ratio", c.mlp_ratio);
    if (doc.contains("input_size")) {
      c.input_width = doc["input_size"].at(0).get<int>();
      c.input_height = doc["input_size"].at(1).get<int>();
    }
    c.width_multiplier = doc.value("width_multiplier", c.width_multiplier);
    c.base_width_coefficient = doc.value("base_width_coefficient", c.base_width_coefficient);
    c.base_depth_coefficient = doc.value("base_depth_coefficient", c.base_depth_coefficient);
    c.zero_init_head = doc.value("zero_init_head", c.zero_init_head);
    c.seed = doc.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

ConvBnActImpl::ConvBnActImpl(int in, int out, int kernel, int stride, int groups, Act act_) : act(act_) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                       .stride(stride)
                                                       .padding(kernel / 2)
                                                       .groups(groups)
                                                       .bias(false)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnActImpl::forward(torch::Tensor x) {
  x = bn(conv(x));
  switch (act) {
    case Act::kNone: return x;
    case Act::kReLU: return torch::relu(x);
    case Act::kHardswish: return torch::hardswish(x);
    case Act::kSiLU: return torch::silu(x);
  }
  return x;
}

SqueezeExciteImpl::SqueezeExciteImpl(int channels, int reduced, bool hard_gate_) : hard_gate(hard_gate_) {
  reduce = register_module("reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, reduced, 1)));
  expand = register_module("expand", torch::nn::Conv2d(torch::nn::Conv2dOptions(reduced, channels, 1)));
}

torch::Tensor SqueezeExciteImpl::forward(torch::Tensor x) {
  auto s = x.mean({2, 3}, /*keepdim=*/true);
  s = reduce(s);
  s = hard_gate ? torch::relu(s) : torch::silu(s);
  s = expand(s);
  s = hard_gate ? torch::hardsigmoid(s) : torch::sigmoid(s);
  return x * s;
}

InvertedResidualImpl::InvertedResidualImpl(const Options& o) : use_residual(o.stride == 1 && o.in == o.out) {
  if (o.expanded != o.in) {
    expand = register_module("expand", ConvBnAct(o.in, o.expanded, 1, 1, 1, o.act));
  }
  depthwise = register_module("depthwise", ConvBnAct(o.expanded, o.expanded, o.kernel, o.stride, o.expanded, o.act));
  if (o.squeeze_excite) {
    se = register_module("se", SqueezeExcite(o.expanded, o.se_reduced, o.hard_gate));
  }
  project = register_module("project", ConvBnAct(o.expanded, o.out, 1, 1, 1, Act::kNone));
}

torch::Tensor InvertedResidualImpl::forward(torch::Tensor x) {
  auto y = expand ? expand(x) : x;
  y = depthwise(y);
  if (se) y = se(y);
  y = project(y);
  return use_residual ? x + y : y;
}

DecoderBlockImpl::DecoderBlockImpl(int in, int skip, int out, bool separable) : has_skip(skip > 0) {
  const int total = in + skip;
  body = torch::nn::Sequential();
  if (separable) {
    body->push_back(ConvBnAct(total, total, 3, 1, total, Act::kReLU));
    body->push_back(ConvBnAct(total, out, 1, 1, 1, Act::kReLU));
  } else {
    body->push_back(ConvBnAct(total, out, 3, 1, 1, Act::kReLU));
  }
  register_module("body", body);
}

torch::Tensor DecoderBlockImpl::forward(torch::Tensor x, torch::Tensor skip) {
  if (has_skip) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    x = torch::cat({x, skip}, 1);
  }
  return body->forward(x);
}

namespace {

struct BneckSpec {
  int kernel, expanded, out;
  bool se;
  Act act;
  int stride;
};

// MobileNetV3-Large bottleneck table.
constexpr BneckSpec kMobileNetV3[] = {
    {3, 16, 16, false, Act::kReLU, 1},      {3, 64, 24, false, Act::kReLU, 2},
    {3, 72, 24, false, Act::kReLU, 1},      {5, 72, 40, true, Act::kReLU, 2},
    {5, 120, 40, true, Act::kReLU, 1},      {5, 120, 40, true, Act::kReLU, 1},
    {3, 240, 80, false, Act::kHardswish, 2}, {3, 200, 80, false, Act::kHardswish, 1},
    {3, 184, 80, false, Act::kHardswish, 1}, {3, 184, 80, false, Act::kHardswish, 1},
    {3, 480, 112, true, Act::kHardswish, 1}, {3, 672, 112, true, Act::kHardswish, 1},
    {5, 672, 160, true, Act::kHardswish, 2}, {5, 960, 160, true, Act::kHardswish, 1},
    {5, 960, 160, true, Act::kHardswish, 1},
};
// Last block at strides 2, 4, 8, 16, 32.
const std::vector<std::size_t> kMobileNetTaps = {0, 2, 5, 11, 14};

// Decoder widths from deepest to shallowest; the sixth block emits N.
// Tuned so the full LIGHT model lands on the reference parameter budget.
constexpr int kLightDecoder[] = {800, 384, 192, 96, 64};

struct MbStage {
  int expand, kernel, stride, out, repeats;
};
// EfficientNet-B0 stage table; compound scaling is applied on top.
constexpr MbStage kEfficientB0[] = {
    {1, 3, 1, 16, 1}, {6, 3, 2, 24, 2}, {6, 5, 2, 40, 2}, {6, 3, 2, 80, 3},
    {6, 5, 1, 112, 3}, {6, 5, 2, 192, 4}, {6, 3, 1, 320, 1},
};
// Stages whose final block is tapped (strides 2, 4, 8, 16, 32).
constexpr int kEfficientTapStages[] = {0, 1, 2, 4, 6};
constexpr int kBaseDecoder[] = {512, 320, 192, 128, 128};

std::vector<torch::Tensor> run_encoder(ConvBnAct& stem, torch::nn::ModuleList& blocks,
                                       const std::vector<std::size_t>& taps, torch::Tensor x) {
  x = stem->forward(x);
  std::vector<torch::Tensor> skips;
  std::size_t next = 0;
  for (std::size_t i = 0; i < blocks->size(); ++i) {
    x = blocks[i]->as<InvertedResidual>()->forward(x);
    if (next < taps.size() && taps[next] == i) {
      skips.push_back(x);
      ++next;
    }
  }
  return skips;
}

torch::Tensor run_decoder(std::vector<DecoderBlock>& decoder, const std::vector<torch::Tensor>& skips) {
  // skips: stride 2, 4, 8, 16, 32
  auto x = decoder[0]->forward(skips[4]);
  x = decoder[1]->forward(x, skips[3]);
  x = decoder[2]->forward(x, skips[2]);
  x = decoder[3]->forward(x, skips[1]);
  x = decoder[4]->forward(x, skips[0]);
  return decoder[5]->forward(x);
}

}  // namespace

MobileNetBackbone::MobileNetBackbone(const ModelConfig& config) : out_channels_(config.backbone_channels) {
  const double wm = config.width_multiplier;
  auto width = [wm](int c) { return make_divisible(c * wm, 8); };

  const int stem_out = width(16);
  stem_ = register_module("stem", ConvBnAct(3, stem_out, 3, 2, 1, Act::kHardswish));
  blocks_ = torch::nn::ModuleList();
  int in = stem_out;
  std::vector<int> tap_channels;
  for (std::size_t i = 0; i < std::size(kMobileNetV3); ++i) {
    const auto& b = kMobileNetV3[i];
    InvertedResidualImpl::Options o;
    o.in = in;
    o.expanded = width(b.expanded);
    o.out = width(b.out);
    o.kernel = b.kernel;
    o.stride = b.stride;
    o.squeeze_excite = b.se;
    o.se_reduced = make_divisible(o.expanded / 4.0, 8);
    o.hard_gate = true;
    o.act = b.act;
    blocks_->push_back(InvertedResidual(o));
    in = o.out;
    if (std::find(kMobileNetTaps.begin(), kMobileNetTaps.end(), i) != kMobileNetTaps.end()) {
      tap_channels.push_back(o.out);
    }
  }
  register_module("encoder", blocks_);
  taps_ = kMobileNetTaps;

  std::vector<int> widths;
  for (int c : kLightDecoder) widths.push_back(make_divisible(c * wm, 8));
  // deepest block has no skip; blocks 2-5 take skips at strides 16, 8, 4, 2
  decoder_.push_back(DecoderBlock(tap_channels[4], 0, widths[0], false));
  decoder_.push_back(DecoderBlock(widths[0], tap_channels[3], widths[1], false));
  decoder_.push_back(DecoderBlock(widths[1], tap_channels[2], widths[2], true));
  decoder_.push_back(DecoderBlock(widths[2], tap_channels[1], widths[3], true));
  decoder_.push_back(DecoderBlock(widths[3], tap_channels[0], widths[4], true));
  decoder_.push_back(DecoderBlock(widths[4], 0, out_channels_, true));
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    register_module("decoder" + std::to_string(i), decoder_[i]);
  }
}

torch::Tensor MobileNetBackbone::forward(torch::Tensor x) {
  return run_decoder(decoder_, run_encoder(stem_, blocks_, taps_, x));
}

EfficientBackbone::EfficientBackbone(const ModelConfig& config) : out_channels_(config.backbone_channels) {
  const double wc = config.base_width_coefficient * config.width_multiplier;
  const double dc = config.base_depth_coefficient;
  auto width = [wc](int c) { return make_divisible(c * wc, 8); };

  const int stem_out = width(32);
  stem_ = register_module("stem", ConvBnAct(3, stem_out, 3, 2, 1, Act::kSiLU));
  blocks_ = torch::nn::ModuleList();
  int in = stem_out;
  std::vector<int> tap_channels;
  for (std::size_t s = 0; s < std::size(kEfficientB0); ++s) {
    const auto& stage = kEfficientB0[s];
    const int out = width(stage.out);
    const int repeats = static_cast<int>(std::ceil(stage.repeats * dc));
    for (int r = 0; r < repeats; ++r) {
      InvertedResidualImpl::Options o;
      o.in = in;
      o.expanded = in * stage.expand;
      o.out = out;
      o.kernel = stage.kernel;
      o.stride = r == 0 ? stage.stride : 1;
      o.squeeze_excite = true;
      o.se_reduced = std::max(1, in / 4);
      o.hard_gate = false;
      o.act = Act::kSiLU;
      blocks_->push_back(InvertedResidual(o));
      in = out;
    }
    if (std::find(std::begin(kEfficientTapStages), std::end(kEfficientTapStages), static_cast<int>(s)) !=
        std::end(kEfficientTapStages)) {
      taps_.push_back(blocks_->size() - 1);
      tap_channels.push_back(out);
    }
  }
  register_module("encoder", blocks_);

  std::vector<int> widths;
  for (int c : kBaseDecoder) widths.push_back(make_divisible(c * config.width_multiplier, 8));
  decoder_.push_back(DecoderBlock(tap_channels[4], 0, widths[0], false));
  decoder_.push_back(DecoderBlock(widths[0], tap_channels[3], widths[1], false));
  decoder_.push_back(DecoderBlock(widths[1], tap_channels[2], widths[2], true));
  decoder_.push_back(DecoderBlock(widths[2], tap_channels[1], widths[3], true));
  decoder_.push_back(DecoderBlock(widths[3], tap_channels[0], widths[4], true));
  decoder_.push_back(DecoderBlock(widths[4], 0, out_channels_, true));
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    register_module("decoder" + std::to_string(i), decoder_[i]);
  }
}

torch::Tensor EfficientBackbone::forward(torch::Tensor x) {
  return run_decoder(decoder_, run_encoder(stem_, blocks_, taps_, x));
}

// ---------------------------------------------------------------------------

MultiHeadSelfAttentionImpl::MultiHeadSelfAttentionImpl(int embed_dim, int heads_) : heads(heads_) {
  query = register_module("query", torch::nn::Linear(embed_dim, embed_dim));
  key = register_module("key", torch::nn::Linear(embed_dim, embed_dim));
  value = register_module("value", torch::nn::Linear(embed_dim, embed_dim));
  output = register_module("output", torch::nn::Linear(embed_dim, embed_dim));
}

torch::Tensor MultiHeadSelfAttentionImpl::forward(torch::Tensor tokens) {
  const auto batch = tokens.size(0), count = tokens.size(1), dim = tokens.size(2);
  const auto head_dim = dim / heads;
  auto split = [&](const torch::Tensor& t) { return t.view({batch, count, heads, head_dim}).transpose(1, 2); };
  auto q = split(query(tokens));
  auto k = split(key(tokens));
  auto v = split(value(tokens));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto attended = torch::matmul(torch::softmax(scores, -1), v);
  return output(attended.transpose(1, 2).reshape({batch, count, dim}));
}

TransformerLayerImpl::TransformerLayerImpl(int embed_dim, int heads, int mlp_hidden) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  attention = register_module("attention", MultiHeadSelfAttention(embed_dim, heads));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  fc1 = register_module("fc1", torch::nn::Linear(embed_dim, mlp_hidden));
  fc2 = register_module("fc2", torch::nn::Linear(mlp_hidden, embed_dim));
}

torch::Tensor TransformerLayerImpl::forward(torch::Tensor tokens) {
  tokens = tokens + attention(norm1(tokens));
  return tokens + fc2(torch::gelu(fc1(norm2(tokens))));
}

ViTRefinerImpl::ViTRefinerImpl(const ModelConfig& config)
    : channels(config.backbone_channels),
      patch(config.patch_size),
      feature_h(config.feature_height()),
      feature_w(config.feature_width()) {
  const int dim = config.embed_dim;
  patch_embed = register_module(
      "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, dim, patch).stride(patch)));
  position_embedding = register_parameter("position_embedding", torch::zeros({1, config.token_count(), dim}));
  layers = torch::nn::ModuleList();
  for (int i = 0; i < config.attn_layers; ++i) {
    layers->push_back(TransformerLayer(dim, config.attn_heads, dim * config.mlp_ratio));
  }
  register_module("layers", layers);
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  token_projection = register_module("token_projection", torch::nn::Linear(dim, channels));
  feature_norm = register_module("feature_norm", torch::nn::BatchNorm2d(channels));
  feature_conv = register_module(
      "feature_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor ViTRefinerImpl::forward(torch::Tensor features) {
  if (features.dim() != 4 || features.size(1) != channels || features.size(2) != feature_h ||
      features.size(3) != feature_w) {
    throw Error(ErrorCode::kShapeMismatch,
                "refiner expects B×" + std::to_string(channels) + "×" + std::to_string(feature_h) + "×" +
                    std::to_string(feature_w) + " features");
  }
  const int64_t pad_h = (patch - feature_h % patch) % patch;
  const int64_t pad_w = (patch - feature_w % patch) % patch;
  auto padded = (pad_h || pad_w) ? F::pad(features, F::PadFuncOptions({0, pad_w, 0, pad_h})) : features;

  auto tokens = patch_embed(padded).flatten(2).transpose(1, 2) + position_embedding;
  for (const auto& layer : *layers) tokens = layer->as<TransformerLayer>()->forward(tokens);
  tokens = norm(tokens);

  // keep the first N output embeddings, drop the rest
  auto kept = token_projection(tokens.slice(1, 0, channels));  // B×N×N
  auto pixels = feature_conv(feature_norm(features));         // B×N×h×w
  auto refined = torch::einsum("bkc,bchw->bkhw", {kept, pixels});
  return refined / std::sqrt(static_cast<double>(channels));
}

CaveLineNetImpl::CaveLineNetImpl(const ModelConfig& config_) : config(config_) {
  if (config.variant == Variant::kLight) {
    backbone = register_module("backbone", std::make_shared<MobileNetBackbone>(config));
  } else {
    backbone = register_module("backbone", std::make_shared<EfficientBackbone>(config));
  }
  refiner = register_module("refiner", ViTRefiner(config));
  head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.backbone_channels, 1, 1)));
  if (config.zero_init_head) {
    torch::NoGradGuard guard;
    head->weight.zero_();
    head->bias.zero_();
  }
}

torch::Tensor CaveLineNetImpl::forward(torch::Tensor images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config.input_height ||
      images.size(3) != config.input_width) {
    throw Error(ErrorCode::kShapeMismatch, "expected B×3×" + std::to_string(config.input_height) + "×" +
                                               std::to_string(config.input_width) + " input");
  }
  auto refined = refiner(backbone->forward(images));
  // The 1×1 head and the bilinear ×2 upsampling are both linear and commute;
  // the head runs first so the resize touches one channel instead of N.
  auto logits = head(refined);
  return F::interpolate(logits, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{config.input_height, config.input_width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
}

CaveLineNet build_model(const ModelConfig& config) {
  config.validate();
  torch::manual_seed(config.seed);
  return CaveLineNet(config);
}

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t total = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) total += p.numel();
  }
  return total;
}

torch::Tensor image_to_tensor(const cv::Mat& rgb01) {
  CV_Assert(rgb01.type() == CV_32FC3);
  cv::Mat contiguous = rgb01.isContinuous() ? rgb01 : rgb01.clone();
  return torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kFloat32)
      .permute({2, 0, 1})
      .clone();
}

torch::Tensor mask_to_tensor(const cv::Mat& mask01) {
  cv::Mat as_float;
  mask01.convertTo(as_float, CV_32F);
  return torch::from_blob(as_float.data, {as_float.rows, as_float.cols}, torch::kFloat32).clone();
}

cv::Mat tensor_to_prob(const torch::Tensor& hw) {
  auto t = hw.detach().to(torch::kFloat32).contiguous();
  cv::Mat out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32F);
  std::memcpy(out.data, t.data_ptr<float>(), sizeof(float) * t.numel());
  return out;
}

PredictionBatch predict(CaveLineNet& model, const torch::Tensor& batch_nhwc, std::vector<std::string> sample_ids) {
  const auto& c = model->config;
  if (batch_nhwc.dim() != 4 || batch_nhwc.size(3) != 3) {
    throw Error(ErrorCode::kShapeMismatch, "expected a B×H×W×3 batch");
  }
  if (!sample_ids.empty() && static_cast<std::int64_t>(sample_ids.size()) != batch_nhwc.size(0)) {
    throw Error(ErrorCode::kShapeMismatch, "got " + std::to_string(sample_ids.size()) + " ids for a batch of " +
                                               std::to_string(batch_nhwc.size(0)));
  }
  PredictionBatch out;
  out.sample_ids = std::move(sample_ids);
  if (batch_nhwc.size(0) == 0) {
    out.probs = torch::empty({0, c.input_height, c.input_width});
    return out;
  }
  if (batch_nhwc.size(1) != c.input_height || batch_nhwc.size(2) != c.input_width) {
    throw Error(ErrorCode::kShapeMismatch, "batch spatial size does not match model input size");
  }
  model->eval();
  torch::NoGradGuard no_grad;
  auto images = batch_nhwc.to(torch::kFloat32).permute({0, 3, 1, 2}).contiguous();
  out.probs = model->probabilities(images).squeeze(1);
  return out;
}

cv::Mat predict_image(CaveLineNet& model, const cv::Mat& rgb01) {
  auto batch = image_to_tensor(rgb01).permute({1, 2, 0}).unsqueeze(0);
  return tensor_to_prob(predict(model, batch).probs[0]);
}

}  // namespace caveline
