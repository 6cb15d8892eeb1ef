#include "test_prelude.hpp"

#include <cmath>

#include "caveline/error.hpp"
#include "caveline/losses.hpp"

using namespace caveline;

namespace {

torch::Tensor t(std::vector<double> values) { return torch::tensor(values, torch::kFloat64); }

// Central finite differences of a scalar function of `x`.
torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                           double h = 1e-6) {
  auto grad = torch::zeros_like(x);
  auto flat = x.reshape(-1);
  auto g = grad.reshape(-1);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = flat.clone(), minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    g[i] = (f(plus.view_as(x)) - f(minus.view_as(x))) / (2 * h);
  }
  return grad;
}

double max_relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  auto diff = (a - b).abs();
  auto scale = torch::max(a.abs(), b.abs()).clamp_min(1e-12);
  return (diff / scale).max().item<double>();
}

}  // namespace

TEST_CASE("bce matches hand arithmetic") {
  SUBCASE("constant one half gives ln 2") {
    auto pred = torch::full({4, 4}, 0.5, torch::kFloat64);
    auto target = torch::randint(0, 2, {4, 4}, torch::kFloat64);
    CHECK(bce_loss(pred, target).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("two-pixel worked case") {
    const double expected = (-std::log(0.9) - std::log(0.8)) / 2.0;
    CHECK(bce_loss(t({0.9, 0.2}), t({1, 0})).item<double>() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.16425).epsilon(1e-4));
  }
  SUBCASE("perfect prediction costs -ln(1-eps)") {
    auto target = t({1, 0, 1, 1});
    CHECK(bce_loss(target, target).item<double>() == doctest::Approx(-std::log(1.0 - kBceEpsilon)).epsilon(1e-9));
  }
}

TEST_CASE("dice matches hand arithmetic") {
  CHECK(dice_loss(t({1, 0, 1, 1}), t({1, 0, 1, 1})).item<double>() == doctest::Approx(0.0));
  CHECK(dice_loss(t({1, 1, 0, 0}), t({0, 0, 1, 1})).item<double>() == doctest::Approx(1.0));
  CHECK(dice_loss(t({1, 1, 0, 0}), t({1, 0, 1, 0})).item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  // both empty is defined, not a crash
  CHECK(dice_loss(t({0, 0}), t({0, 0})).item<double>() == doctest::Approx(0.0));
  // smoothing adds to numerator and denominator
  CHECK(dice_loss(t({1, 1, 0, 0}), t({1, 0, 1, 0}), 1.0).item<double>() == doctest::Approx(1.0 - 3.0 / 5.0));
}

TEST_CASE("combined loss is the weighted sum") {
  auto pred = torch::rand({6, 6}, torch::kFloat64) * 0.9 + 0.05;
  auto target = torch::randint(0, 2, {6, 6}, torch::kFloat64);
  CHECK(combined_loss(pred, target, {1.0, 0.0}).item<double>() == bce_loss(pred, target).item<double>());
  CHECK(combined_loss(pred, target, {0.0, 1.0}).item<double>() == dice_loss(pred, target).item<double>());

  // pred = 0.5 everywhere, half the target on: ln 2 + (1 - 2*1 / (2 + 1))
  auto half = torch::full({4}, 0.5, torch::kFloat64);
  const double dice = 1.0 - (2.0 * 0.5 * 2.0) / (2.0 + 4 * 0.25);
  CHECK(combined_loss(half, t({1, 1, 0, 0}), {1.0, 1.0}).item<double>() ==
        doctest::Approx(std::log(2.0) + dice).epsilon(1e-12));

  CHECK_THROWS_AS(combined_loss(pred, target, {0.0, 0.0}), Error);
}

TEST_CASE("loss ranges") {
  torch::manual_seed(3);
  for (int i = 0; i < 50; ++i) {
    auto pred = torch::rand({8, 8}, torch::kFloat64);
    auto target = torch::randint(0, 2, {8, 8}, torch::kFloat64);
    const double d = dice_loss(pred, target).item<double>();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(bce_loss(pred, target).item<double>() >= 0.0);
    CHECK(combined_loss(pred, target, {0.3, 2.0}).item<double>() >= 0.0);
  }
}

TEST_CASE("analytic gradients match finite differences") {
  for (int seed = 0; seed < 5; ++seed) {
    torch::manual_seed(seed);
    auto pred = (torch::rand({8, 8}, torch::kFloat64) * 0.9 + 0.05).requires_grad_(true);
    auto target = torch::randint(0, 2, {8, 8}, torch::kFloat64);
    const LossWeights weights{0.7, 1.3};

    std::vector<std::pair<const char*, std::function<torch::Tensor(const torch::Tensor&)>>> losses = {
        {"bce", [&](const torch::Tensor& p) { return bce_loss(p, target); }},
        {"dice", [&](const torch::Tensor& p) { return dice_loss(p, target); }},
        {"combined", [&](const torch::Tensor& p) { return combined_loss(p, target, weights); }},
    };
    for (auto& [name, fn] : losses) {
      CAPTURE(name);
      auto analytic = torch::autograd::grad({fn(pred)}, {pred})[0];
      torch::NoGradGuard guard;
      auto numeric = numeric_grad([&](const torch::Tensor& p) { return fn(p).item<double>(); }, pred.detach());
      CHECK(max_relative_error(analytic, numeric) <= 1e-4);
    }

    auto g_bce = torch::autograd::grad({bce_loss(pred, target)}, {pred})[0];
    auto g_dice = torch::autograd::grad({dice_loss(pred, target)}, {pred})[0];
    auto g_all = torch::autograd::grad({combined_loss(pred, target, weights)}, {pred})[0];
    CHECK(torch::allclose(g_all, 0.7 * g_bce + 1.3 * g_dice, 1e-12, 1e-12));
  }
}

TEST_CASE("per-sample loss over a batch") {
  auto pred = torch::rand({3, 5, 5}, torch::kFloat64) * 0.9 + 0.05;
  auto target = torch::randint(0, 2, {3, 5, 5}, torch::kFloat64);
  auto per = per_sample_loss(pred, target, {});
  REQUIRE(per.size(0) == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(per[i].item<double>() == doctest::Approx(combined_loss(pred[i], target[i], {}).item<double>()));
  }
  CHECK_THROWS_AS(bce_loss(pred, target[0]), Error);
}
