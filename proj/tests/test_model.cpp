#include "test_prelude.hpp"

#include <fstream>
#include <random>

#include "caveline/error.hpp"
#include "caveline/losses.hpp"
#include "caveline/model.hpp"
#include "test_support.hpp"

using namespace caveline;
using caveline::testing::TempDir;

namespace {

constexpr double kLightParams = 12.67e6;
constexpr double kLightMegabytes = 50.90;

ModelConfig micro_light() { return ModelConfig::micro(Variant::kLight, 32, 32); }

torch::Tensor toy_input(int64_t batch, int h, int w, int seed) {
  torch::manual_seed(seed);
  return torch::rand({batch, h, w, 3});
}

}  // namespace

TEST_CASE("config invariants") {
  CHECK(ModelConfig::light().backbone_channels == 48);
  CHECK(ModelConfig::base().backbone_channels == 128);
  CHECK(ModelConfig::light().feature_width() == 480);
  CHECK(ModelConfig::light().feature_height() == 270);
  CHECK(ModelConfig::light().token_count() == 30 * 17);

  auto bad = ModelConfig::light();
  bad.backbone_channels = 64;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = ModelConfig::light();
  bad.attn_heads = 7;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = ModelConfig::base();
  bad.backbone_channels = 48;
  CHECK_THROWS_AS(build_model(bad), Error);

  const auto cfg = micro_light();
  CHECK(to_json(model_config_from_json(to_json(cfg))) == to_json(cfg));
}

TEST_CASE("light model size matches the reference figures") {
  auto model = build_model(ModelConfig::light());
  const auto params = count_parameters(*model);
  MESSAGE("LIGHT parameters: " << params);
  CHECK(std::abs(params - kLightParams) <= 0.05 * kLightParams);

  auto base = build_model(ModelConfig::base());
  CHECK(count_parameters(*base) > params);

  TempDir dir("ckpt_size");
  save_checkpoint(model, dir / "light.ckpt");
  const double megabytes = static_cast<double>(fs::file_size(dir / "light.ckpt")) / 1e6;
  MESSAGE("LIGHT checkpoint MB: " << megabytes);
  CHECK(std::abs(megabytes - kLightMegabytes) <= 0.10 * kLightMegabytes);
}

TEST_CASE("base forward on zeros has the working shape and range") {
  auto model = build_model(ModelConfig::base());
  auto out = predict(model, torch::zeros({1, kWorkingHeight, kWorkingWidth, 3}), {"z"});
  CHECK(out.probs.sizes() == torch::IntArrayRef({1, kWorkingHeight, kWorkingWidth}));
  CHECK(torch::isfinite(out.probs).all().item<bool>());
  CHECK(out.probs.min().item<float>() >= 0.0f);
  CHECK(out.probs.max().item<float>() <= 1.0f);
  CHECK(out.sample_ids == std::vector<std::string>{"z"});
}

TEST_CASE("predict contract") {
  auto cfg = ModelConfig::micro(Variant::kLight, 48, 40);
  auto model = build_model(cfg);
  const auto batch = toy_input(3, 40, 48, 1);

  SUBCASE("deterministic in inference mode") {
    const auto a = predict(model, batch).probs;
    const auto b = predict(model, batch).probs;
    CHECK(torch::equal(a, b));
    CHECK(a.sizes() == torch::IntArrayRef({3, 40, 48}));
  }
  SUBCASE("empty batch") {
    const auto out = predict(model, torch::zeros({0, 40, 48, 3}));
    CHECK(out.probs.size(0) == 0);
    CHECK(out.sample_ids.empty());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(predict(model, torch::zeros({1, 41, 48, 3})), Error);
    CHECK_THROWS_AS(predict(model, torch::zeros({1, 40, 48})), Error);
    CHECK_THROWS_AS(predict(model, batch, {"only-one"}), Error);
  }
  SUBCASE("zero-initialized head gives one half") {
    cfg.zero_init_head = true;
    auto zero = build_model(cfg);
    const auto out = predict(zero, batch).probs;
    CHECK(torch::all(out == 0.5f).item<bool>());
  }
  SUBCASE("single image helper agrees with the batch path") {
    cv::Mat img(40, 48, CV_32FC3);
    std::memcpy(img.data, batch[0].contiguous().data_ptr<float>(), sizeof(float) * 40 * 48 * 3);
    const cv::Mat prob = predict_image(model, img);
    const auto ref = predict(model, batch.slice(0, 0, 1)).probs[0];
    CHECK(prob.type() == CV_32FC1);
    CHECK(torch::allclose(torch::from_blob(prob.data, {40, 48}, torch::kFloat32), ref, 1e-6, 1e-6));
  }
}

TEST_CASE("both micro variants keep the input raster for odd sizes") {
  for (auto variant : {Variant::kLight, Variant::kBase}) {
    auto model = build_model(ModelConfig::micro(variant, 53, 41));
    model->train();
    const auto logits = model->forward(torch::rand({2, 3, 41, 53}));
    CHECK(logits.sizes() == torch::IntArrayRef({2, 1, 41, 53}));
  }
}

TEST_CASE("refiner preserves shape at full feature resolution") {
  const auto cfg = ModelConfig::light();
  ViTRefiner refiner(cfg);
  refiner->eval();
  torch::NoGradGuard guard;
  torch::manual_seed(0);
  const auto out = refiner->forward(torch::randn({1, 48, 270, 480}));
  CHECK(out.sizes() == torch::IntArrayRef({1, 48, 270, 480}));
  CHECK(torch::isfinite(out).all().item<bool>());
  CHECK_THROWS_AS(refiner->forward(torch::randn({1, 47, 270, 480})), Error);
}

TEST_CASE("attention on a two-token toy sequence") {
  constexpr int kDim = 4;
  const auto x = torch::tensor({{1.0, 2.0, 0.5, -1.0}, {3.0, -2.0, 0.0, 4.0}}, torch::kFloat64).unsqueeze(0);

  MultiHeadSelfAttention attn(kDim, 1);
  attn->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    for (auto* lin : {&attn->query, &attn->key}) {
      (*lin)->weight.zero_();
      (*lin)->bias.zero_();
    }
    for (auto* lin : {&attn->value, &attn->output}) {
      (*lin)->weight.copy_(torch::eye(kDim, torch::kFloat64));
      (*lin)->bias.zero_();
    }
  }
  // uniform attention with identity value/output: every token becomes the mean
  const std::vector<double> mean = {2.0, 0.0, 0.25, 1.5};
  const auto y = attn->forward(x);
  for (int t = 0; t < 2; ++t) {
    for (int d = 0; d < kDim; ++d) CHECK(y[0][t][d].item<double>() == doctest::Approx(mean[d]).epsilon(1e-12));
  }

  // full pre-norm layer with the MLP branch silenced: x + mean(LayerNorm(x))
  TransformerLayer layer(kDim, 1, 2 * kDim);
  layer->to(torch::kFloat64);
  layer->attention = attn;
  {
    torch::NoGradGuard guard;
    layer->fc2->weight.zero_();
    layer->fc2->bias.zero_();
  }
  double normed[2][kDim];
  for (int t = 0; t < 2; ++t) {
    double mu = 0.0, var = 0.0;
    for (int d = 0; d < kDim; ++d) mu += x[0][t][d].item<double>() / kDim;
    for (int d = 0; d < kDim; ++d) var += std::pow(x[0][t][d].item<double>() - mu, 2) / kDim;
    for (int d = 0; d < kDim; ++d) normed[t][d] = (x[0][t][d].item<double>() - mu) / std::sqrt(var + 1e-5);
  }
  const auto z = layer->forward(x);
  for (int t = 0; t < 2; ++t) {
    for (int d = 0; d < kDim; ++d) {
      const double expected = x[0][t][d].item<double>() + 0.5 * (normed[0][d] + normed[1][d]);
      CHECK(z[0][t][d].item<double>() == doctest::Approx(expected).epsilon(1e-9));
    }
  }
}

TEST_CASE("refiner jacobian is dense across patches") {
  auto cfg = micro_light();
  ViTRefiner refiner(cfg);
  refiner->to(torch::kFloat64);
  refiner->eval();
  const int p = cfg.patch_size;
  const int h = cfg.feature_height(), w = cfg.feature_width();
  const int rows = (h + p - 1) / p, cols = (w + p - 1) / p;
  torch::manual_seed(4);
  const auto features = torch::randn({1, cfg.backbone_channels, h, w}, torch::kFloat64);

  int zero_pairs = 0;
  for (int out_patch = 0; out_patch < rows * cols; ++out_patch) {
    auto input = features.clone().requires_grad_(true);
    const auto out = refiner->forward(input);
    const int r = out_patch / cols, c = out_patch % cols;
    const auto region = out.index({torch::indexing::Slice(), torch::indexing::Slice(),
                                   torch::indexing::Slice(r * p, std::min(h, (r + 1) * p)),
                                   torch::indexing::Slice(c * p, std::min(w, (c + 1) * p))});
    const auto grad = torch::autograd::grad({region.pow(2).sum()}, {input})[0];
    for (int in_patch = 0; in_patch < rows * cols; ++in_patch) {
      const int ir = in_patch / cols, ic = in_patch % cols;
      const auto g = grad.index({torch::indexing::Slice(), torch::indexing::Slice(),
                                 torch::indexing::Slice(ir * p, std::min(h, (ir + 1) * p)),
                                 torch::indexing::Slice(ic * p, std::min(w, (ic + 1) * p))});
      if (g.abs().max().item<double>() == 0.0) ++zero_pairs;
    }
  }
  CHECK(zero_pairs == 0);

  // finite-difference probe: output patch (0,0) reacts to the opposite corner
  torch::NoGradGuard guard;
  const double eps = 1e-4;
  auto plus = features.clone(), minus = features.clone();
  plus.index_put_({0, 0, h - 1, w - 1}, features[0][0][h - 1][w - 1] + eps);
  minus.index_put_({0, 0, h - 1, w - 1}, features[0][0][h - 1][w - 1] - eps);
  const auto corner = [&](const torch::Tensor& f) {
    return refiner->forward(f).index({0, torch::indexing::Slice(), torch::indexing::Slice(0, p),
                                      torch::indexing::Slice(0, p)});
  };
  const double change = (corner(plus) - corner(minus)).abs().max().item<double>() / (2 * eps);
  CHECK(change > 0.0);
}

TEST_CASE("micro model gradients match central differences for every parameter tensor") {
  auto cfg = micro_light();
  auto model = build_model(cfg);
  model->to(torch::kFloat64);
  model->eval();  // fixed normalization statistics keep the objective smooth in the weights

  torch::manual_seed(9);
  const auto images = torch::rand({2, 3, 32, 32}, torch::kFloat64);
  const auto targets = (torch::rand({2, 32, 32}, torch::kFloat64) > 0.7).to(torch::kFloat64);
  auto objective = [&] {
    const auto probs = torch::sigmoid(model->forward(images)).squeeze(1);
    return combined_loss(probs, targets, {});
  };

  model->zero_grad();
  objective().backward();

  std::mt19937 gen(1);
  int checked = 0, failures = 0, kinks = 0;
  double worst = 0.0;
  const double h = 1e-6, floor = 1e-5;
  auto rel_error = [&](double x, double y) { return std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}); };
  torch::NoGradGuard guard;
  const double base = objective().item<double>();
  for (const auto& item : model->named_parameters()) {
    auto param = item.value();
    auto flat = param.view(-1);
    const auto grad = param.grad().view(-1);
    for (int k = 0, attempts = 0; k < 2 && attempts < 20; ++attempts) {
      const int64_t i = std::uniform_int_distribution<int64_t>(0, flat.numel() - 1)(gen);
      const double original = flat[i].item<double>();
      flat[i] = original + h;
      const double up = objective().item<double>();
      flat[i] = original - h;
      const double down = objective().item<double>();
      flat[i] = original;
      // One-sided slopes that disagree mean a ReLU/hardswish kink lies within
      // h; the derivative is undefined there, so draw another entry.
      if (rel_error((up - base) / h, (base - down) / h) > 1e-3) {
        ++kinks;
        continue;
      }
      ++k;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[i].item<double>();
      const double rel = rel_error(numeric, analytic);
      worst = std::max(worst, rel);
      ++checked;
      if (rel > 1e-3) {
        ++failures;
        MESSAGE(item.key() << "[" << i << "] analytic=" << analytic << " numeric=" << numeric);
      }
    }
  }
  MESSAGE("checked " << checked << " entries (" << kinks << " kink draws skipped), worst relative error " << worst);
  CHECK(failures == 0);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  auto cfg = ModelConfig::micro(Variant::kBase, 64, 48);
  cfg.seed = 12;
  auto model = build_model(cfg);
  // move the normalization buffers away from their defaults
  model->train();
  {
    torch::NoGradGuard guard;
    model->forward(torch::rand({2, 3, 48, 64}));
  }
  save_checkpoint(model, dir / "m.ckpt", {{"epoch", 7}});
  CHECK_FALSE(fs::exists(dir / "m.ckpt.tmp"));

  auto loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.metadata["epoch"] == 7);
  CHECK(to_json(loaded.config) == to_json(cfg));
  const auto batch = toy_input(2, 48, 64, 3);
  CHECK(torch::equal(predict(model, batch).probs, predict(loaded.model, batch).probs));

  auto other = build_model([&] {
    auto c = cfg;
    c.seed = 99;
    return c;
  }());
  CHECK_FALSE(torch::equal(predict(model, batch).probs, predict(other, batch).probs));
  load_weights(other, dir / "m.ckpt");
  CHECK(torch::equal(predict(model, batch).probs, predict(other, batch).probs));

  auto mismatched = build_model(ModelConfig::micro(Variant::kLight, 64, 48));
  CHECK_THROWS_AS(load_weights(mismatched, dir / "m.ckpt"), Error);

  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
}
