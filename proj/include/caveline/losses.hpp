#pragma once

#include <torch/torch.h>

#include "json.hpp"

namespace caveline {

/// Weights of the combined objective λ_CE·BCE + λ_D·Dice.
struct LossWeights {
  double lambda_ce = 1.0;
  double lambda_dice = 1.0;

  void validate() const;
};

nlohmann::json to_json(const LossWeights& weights);
LossWeights loss_weights_from_json(const nlohmann::json& doc);

/// Probabilities are clamped to [eps, 1-eps] before taking logs.
inline constexpr double kBceEpsilon = 1e-7;

/// Mean per-pixel binary cross-entropy.
torch::Tensor bce_loss(const torch::Tensor& pred, const torch::Tensor& target, double eps = kBceEpsilon);

/// 1 - 2Σyŷ / (Σy² + Σŷ²), evaluated per sample and averaged.
///
/// Inputs with more than two dimensions are treated as a batch along dim 0.
/// `smooth` is added to numerator and denominator; with smooth = 0 the
/// all-empty case (both sums zero) is defined as a loss of 0.
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth = 0.0);

torch::Tensor combined_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights,
                            double dice_smooth = 0.0);

/// Combined loss of each sample of a B×... batch, shape [B].
torch::Tensor per_sample_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights,
                              double dice_smooth = 0.0);

}  // namespace caveline
