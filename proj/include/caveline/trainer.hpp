#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "caveline/data.hpp"
#include "caveline/losses.hpp"
#include "caveline/metrics.hpp"
#include "caveline/model.hpp"
#include "json.hpp"

namespace caveline {

struct Augmentation {
  bool hflip = true;
  double brightness_jitter = 0.1;  // multiplicative, uniform in [1-j, 1+j]
  double rotation_deg = 0.0;       // uniform in [-r, r]
};

struct TrainConfig {
  // RMSprop
  double learning_rate = 1e-5;
  double momentum = 0.9;
  double weight_decay = 1e-8;
  double rms_alpha = 0.99;
  double rms_eps = 1e-8;

  int batch_size = 4;
  int max_epochs = 100;
  LossWeights loss_weights;
  double dice_smooth = 0.0;
  Augmentation augmentation;
  int early_stop_patience = 15;  // 0 disables early stopping
  std::uint64_t seed = 0;
  double grad_clip_norm = 5.0;   // <= 0 disables clipping
  double threshold = 0.5;
  int phase = 1;
  bool keep_epoch_checkpoints = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// In-memory training example at model resolution.
struct TrainSample {
  std::string id;
  cv::Mat image;  // CV_32FC3 RGB [0,1]
  cv::Mat mask;   // CV_8UC1 {0,1}
  double weight = 1.0;
};

/// Loads `ids` from `manifest` at `size`; every sample must carry a mask.
std::vector<TrainSample> load_train_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids,
                                            cv::Size size);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_iou = 0.0;
  double val_f1 = 0.0;
};

struct TrainRecord {
  double initial_loss = 0.0;  // objective of the untrained weights over the train set ("epoch 0")
  std::vector<EpochStats> epochs;
  std::filesystem::path best_checkpoint;
  int best_epoch = 0;
  double best_val_iou = 0.0;
  double best_val_f1 = 0.0;
  double wall_time = 0.0;
};

nlohmann::json to_json(const TrainRecord& record);

using EpochCallback = std::function<void(const EpochStats&)>;

/// One supervised phase. Writes `phase{K}_epoch{E}.ckpt` for the best
/// validation IoU and `train_record.json` into `out_dir`, and leaves the best
/// weights loaded in `model`.
TrainRecord train(CaveLineNet& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& config,
                  const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

/// Probability map (CV_32FC1) for a sample.
using MaskPredictor = std::function<cv::Mat(const TrainSample&)>;

EvalReport validate_predictor(const MaskPredictor& predictor, std::span<const TrainSample> val_set, double threshold = 0.5);
EvalReport validate(CaveLineNet& model, std::span<const TrainSample> val_set, double threshold = 0.5,
                    int batch_size = 4);

/// Mean training objective of `model` over `samples` in training mode without
/// touching weights or normalization statistics.
double evaluate_loss(CaveLineNet& model, std::span<const TrainSample> samples, const TrainConfig& config);

// Augmentation ---------------------------------------------------------------

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0.0;
  double brightness = 1.0;
};

AugmentParams sample_augmentation(const Augmentation& aug, Rng& rng);
/// The geometric part of `params` applied to any raster. Masks should use
/// nearest-neighbour interpolation so they stay binary.
cv::Mat apply_geometric(const cv::Mat& raster, const AugmentParams& params, int interpolation);
/// Geometric transform on both rasters, photometric jitter on the image only.
TrainSample augment(const TrainSample& sample, const AugmentParams& params);

}  // namespace caveline
