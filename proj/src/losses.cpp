#include "caveline/losses.hpp"

#include "caveline/error.hpp"

namespace caveline {

void LossWeights::validate() const {
  if (lambda_ce < 0.0 || lambda_dice < 0.0) throw Error(ErrorCode::kInvalidConfig, "loss weights must be >= 0");
  if (lambda_ce == 0.0 && lambda_dice == 0.0) throw Error(ErrorCode::kInvalidConfig, "loss weights are both zero");
}

nlohmann::json to_json(const LossWeights& w) { return {{"lambda_ce", w.lambda_ce}, {"lambda_dice", w.lambda_dice}}; }

LossWeights loss_weights_from_json(const nlohmann::json& doc) {
  LossWeights w;
  w.lambda_ce = doc.value("lambda_ce", w.lambda_ce);
  w.lambda_dice = doc.value("lambda_dice", w.lambda_dice);
  w.validate();
  return w;
}

namespace {

void check_shapes(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.sizes() != target.sizes()) throw Error(ErrorCode::kShapeMismatch, "prediction and target shapes differ");
}

torch::Tensor as_batch(const torch::Tensor& t) {
  return t.dim() <= 2 ? t.reshape({1, -1}) : t.reshape({t.size(0), -1});
}

torch::Tensor bce_per_sample(const torch::Tensor& pred, const torch::Tensor& target, double eps) {
  auto p = as_batch(pred).clamp(eps, 1.0 - eps);
  auto y = as_batch(target).to(p.scalar_type());
  return -(y * torch::log(p) + (1.0 - y) * torch::log(1.0 - p)).mean(1);
}

torch::Tensor dice_per_sample(const torch::Tensor& pred, const torch::Tensor& target, double smooth) {
  auto p = as_batch(pred);
  auto y = as_batch(target).to(p.scalar_type());
  auto overlap = 2.0 * (y * p).sum(1) + smooth;
  auto denom = (y * y).sum(1) + (p * p).sum(1) + smooth;
  auto defined = denom > 0;
  auto safe = torch::where(defined, denom, torch::ones_like(denom));
  return torch::where(defined, 1.0 - overlap / safe, torch::zeros_like(denom));
}

}  // namespace

torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps) {
  check_shapes(pred, target);
  auto p = pred.clamp(eps, 1.0 - eps);
  auto y = target.to(p.scalar_type());
  return -(y * torch::log(p) + (1.0 - y) * torch::log(1.0 - p)).mean();
}

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth) {
  check_shapes(pred, target);
  return dice_per_sample(pred, target, smooth).mean();
}

torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights,
                            double dice_smooth) {
  weights.validate();
  check_shapes(pred, target);
  return weights.lambda_ce * bce_loss(pred, target) + weights.lambda_dice * dice_loss(pred, target, dice_smooth);
}

torch::Tensor per_sample_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights,
                              double dice_smooth) {
  weights.validate();
  check_shapes(pred, target);
  return weights.lambda_ce * bce_per_sample(pred, target, kBceEpsilon) +
         weights.lambda_dice * dice_per_sample(pred, target, dice_smooth);
}

}  // namespace caveline
