#include "caveline/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "caveline/error.hpp"

namespace caveline {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, "train: " + what); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 0) fail("max_epochs must be >= 0");
  if (momentum < 0.0 || weight_decay < 0.0) fail("momentum and weight_decay must be >= 0");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) fail("threshold must lie in (0,1)");
  if (augmentation.brightness_jitter < 0.0 || augmentation.brightness_jitter >= 1.0) {
    fail("brightness_jitter must lie in [0,1)");
  }
  loss_weights.validate();
}

json to_json(const TrainConfig& c) {
  return {{"optimizer",
           {{"name", "rmsprop"},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"alpha", c.rms_alpha},
            {"eps", c.rms_eps}}},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"loss_weights", to_json(c.loss_weights)},
          {"dice_smooth", c.dice_smooth},
          {"augmentation",
           {{"hflip", c.augmentation.hflip},
            {"brightness_jitter", c.augmentation.brightness_jitter},
            {"rotation_deg", c.augmentation.rotation_deg}}},
          {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},
          {"grad_clip_norm", c.grad_clip_norm},
          {"threshold", c.threshold},
          {"phase", c.phase},
          {"keep_epoch_checkpoints", c.keep_epoch_checkpoints}};
}

TrainConfig train_config_from_json(const json& doc) {
  TrainConfig c;
  try {
    if (doc.contains("optimizer")) {
      const auto& o = doc["optimizer"];
      c.learning_rate = o.value("learning_rate", c.learning_rate);
      c.momentum = o.value("momentum", c.momentum);
      c.weight_decay = o.value("weight_decay", c.weight_decay);
      c.rms_alpha = o.value("alpha", c.rms_alpha);
      c.rms_eps = o.value("eps", c.rms_eps);
    }
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.max_epochs = doc.value("max_epochs", c.max_epochs);
    if (doc.contains("loss_weights")) c.loss_weights = loss_weights_from_json(doc["loss_weights"]);
    c.dice_smooth = doc.value("dice_smooth", c.dice_smooth);
    if (doc.contains("augmentation")) {
      const auto& a = doc["augmentation"];
      c.augmentation.hflip = a.value("hflip", c.augmentation.hflip);
      c.augmentation.brightness_jitter = a.value("brightness_jitter", c.augmentation.brightness_jitter);
      c.augmentation.rotation_deg = a.value("rotation_deg", c.augmentation.rotation_deg);
    }
    c.early_stop_patience = doc.value("early_stop_patience", c.early_stop_patience);
    c.seed = doc.value("seed", c.seed);
    c.grad_clip_norm = doc.value("grad_clip_norm", c.grad_clip_norm);
    c.threshold = doc.value("threshold", c.threshold);
    c.phase = doc.value("phase", c.phase);
    c.keep_epoch_checkpoints = doc.value("keep_epoch_checkpoints", c.keep_epoch_checkpoints);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const TrainRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_iou", e.val_iou}, {"val_f1", e.val_f1}});
  }
  return {{"initial_loss", r.initial_loss},
          {"epochs", epochs},
          {"best_checkpoint", r.best_checkpoint.string()},
          {"best_epoch", r.best_epoch},
          {"best_val_iou", r.best_val_iou},
          {"best_val_f1", r.best_val_f1},
          {"wall_time", r.wall_time}};
}

std::vector<TrainSample> load_train_samples(const DatasetManifest& manifest, const std::vector<std::string>& ids,
                                            cv::Size size) {
  std::vector<TrainSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const ManifestEntry* entry = manifest.find(id);
    if (!entry) throw Error(ErrorCode::kUnknownSample, id);
    if (!entry->mask) throw Error(ErrorCode::kInvalidArgument, "sample " + id + " has no mask");
    ImageSample s = load_sample(manifest, *entry, size);
    out.push_back({s.id, s.image, *s.mask, 1.0});
  }
  return out;
}

AugmentParams sample_augmentation(const Augmentation& aug, Rng& rng) {
  AugmentParams p;
  p.flip = aug.hflip && rng.uniform() < 0.5;
  if (aug.rotation_deg > 0.0) p.angle_deg = rng.uniform(-aug.rotation_deg, aug.rotation_deg);
  if (aug.brightness_jitter > 0.0) p.brightness = rng.uniform(1.0 - aug.brightness_jitter, 1.0 + aug.brightness_jitter);
  return p;
}

cv::Mat apply_geometric(const cv::Mat& raster, const AugmentParams& params, int interpolation) {
  cv::Mat out;
  if (params.flip) {
    cv::flip(raster, out, 1);
  } else {
    out = raster;
  }
  if (params.angle_deg != 0.0) {
    const cv::Point2f center((out.cols - 1) / 2.0f, (out.rows - 1) / 2.0f);
    const cv::Mat rot = cv::getRotationMatrix2D(center, params.angle_deg, 1.0);
    cv::Mat rotated;
    cv::warpAffine(out, rotated, rot, out.size(), interpolation, cv::BORDER_CONSTANT, cv::Scalar::all(0));
    out = rotated;
  }
  return out.data == raster.data ? raster.clone() : out;
}

TrainSample augment(const TrainSample& sample, const AugmentParams& params) {
  TrainSample out;
  out.id = sample.id;
  out.weight = sample.weight;
  out.image = apply_geometric(sample.image, params, cv::INTER_LINEAR);
  out.mask = apply_geometric(sample.mask, params, cv::INTER_NEAREST);
  if (params.brightness != 1.0) {
    out.image *= params.brightness;
    cv::Mat flat = out.image.reshape(1);
    cv::min(flat, 1.0, flat);
  }
  return out;
}

namespace {

struct Batch {
  torch::Tensor images;   // B×3×H×W
  torch::Tensor masks;    // B×H×W
  torch::Tensor weights;  // B
  std::vector<std::string> ids;
};

Batch make_batch(const std::vector<const TrainSample*>& samples) {
  Batch batch;
  std::vector<torch::Tensor> images, masks;
  std::vector<float> weights;
  for (const TrainSample* s : samples) {
    images.push_back(image_to_tensor(s->image));
    masks.push_back(mask_to_tensor(s->mask));
    weights.push_back(static_cast<float>(s->weight));
    batch.ids.push_back(s->id);
  }
  batch.images = torch::stack(images);
  batch.masks = torch::stack(masks);
  batch.weights = torch::tensor(weights);
  return batch;
}

torch::Tensor batch_loss(CaveLineNet& model, const Batch& batch, const TrainConfig& config) {
  auto probs = model->probabilities(batch.images).squeeze(1);
  auto losses = per_sample_loss(probs, batch.masks, config.loss_weights, config.dice_smooth);
  return (losses * batch.weights).sum() / batch.weights.sum();
}

void check_nonempty(const std::vector<TrainSample>& set, const char* what) {
  if (set.empty()) throw Error(ErrorCode::kEmptyDataset, std::string(what) + " set is empty");
  for (const auto& s : set) {
    if (s.mask.empty()) throw Error(ErrorCode::kInvalidArgument, "sample " + s.id + " has no mask");
  }
}

std::string join(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) out += (out.empty() ? "" : ",") + id;
  return out;
}

}  // namespace

double evaluate_loss(CaveLineNet& model, std::span<const TrainSample> samples, const TrainConfig& config) {
  if (samples.empty()) throw Error(ErrorCode::kEmptyDataset, "no samples to evaluate");
  std::vector<torch::Tensor> saved;
  for (const auto& b : model->buffers()) saved.push_back(b.clone());
  model->train();
  torch::NoGradGuard no_grad;
  double total = 0.0, weight = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += config.batch_size) {
    std::vector<const TrainSample*> chunk;
    for (std::size_t i = start; i < std::min(samples.size(), start + config.batch_size); ++i) chunk.push_back(&samples[i]);
    const Batch batch = make_batch(chunk);
    const double w = batch.weights.sum().item<double>();
    total += batch_loss(model, batch, config).item<double>() * w;
    weight += w;
  }
  auto buffers = model->buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i].copy_(saved[i]);
  return total / weight;
}

EvalReport validate_predictor(const MaskPredictor& predictor, std::span<const TrainSample> val_set, double threshold) {
  if (val_set.empty()) throw Error(ErrorCode::kEmptyDataset, "validation set is empty");
  std::vector<SampleScore> scores;
  scores.reserve(val_set.size());
  for (const auto& sample : val_set) {
    if (sample.mask.empty()) throw Error(ErrorCode::kInvalidArgument, "sample " + sample.id + " has no mask");
    scores.push_back(score_sample(sample.id, binarize(predictor(sample), threshold), sample.mask));
  }
  return EvalReport::from_scores(std::move(scores));
}

EvalReport validate(CaveLineNet& model, std::span<const TrainSample> val_set, double threshold, int batch_size) {
  if (val_set.empty()) throw Error(ErrorCode::kEmptyDataset, "validation set is empty");
  model->eval();
  torch::NoGradGuard no_grad;
  std::vector<SampleScore> scores;
  for (std::size_t start = 0; start < val_set.size(); start += batch_size) {
    std::vector<const TrainSample*> chunk;
    for (std::size_t i = start; i < std::min(val_set.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      if (val_set[i].mask.empty()) throw Error(ErrorCode::kInvalidArgument, "sample " + val_set[i].id + " has no mask");
      chunk.push_back(&val_set[i]);
    }
    const Batch batch = make_batch(chunk);
    auto probs = model->probabilities(batch.images).squeeze(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const cv::Mat pred = binarize(tensor_to_prob(probs[static_cast<int64_t>(i)]), threshold);
      scores.push_back(score_sample(chunk[i]->id, pred, chunk[i]->mask));
    }
  }
  return EvalReport::from_scores(std::move(scores));
}

TrainRecord train(CaveLineNet& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& config, const fs::path& out_dir,
                  const EpochCallback& on_epoch) {
  config.validate();
  check_nonempty(train_set, "training");
  const std::vector<TrainSample>& eval_set = val_set.empty() ? train_set : val_set;
  check_nonempty(eval_set, "validation");
  fs::create_directories(out_dir);

  const auto started = std::chrono::steady_clock::now();
  torch::manual_seed(config.seed);
  Rng rng(config.seed);

  TrainRecord record;
  record.initial_loss = evaluate_loss(model, train_set, config);

  auto checkpoint_path = [&](int epoch) {
    return out_dir / ("phase" + std::to_string(config.phase) + "_epoch" + std::to_string(epoch) + ".ckpt");
  };
  auto save = [&](int epoch, const EvalReport* report) {
    json meta = {{"phase", config.phase}, {"epoch", epoch}};
    if (report) {
      meta["val_iou"] = report->iou;
      meta["val_f1"] = report->f1;
    }
    const fs::path path = checkpoint_path(epoch);
    save_checkpoint(model, path, meta);
    return path;
  };

  if (config.max_epochs == 0) {
    record.best_checkpoint = save(0, nullptr);
  }

  torch::optim::RMSprop optimizer(model->parameters(), torch::optim::RMSpropOptions(config.learning_rate)
                                                           .alpha(config.rms_alpha)
                                                           .eps(config.rms_eps)
                                                           .weight_decay(config.weight_decay)
                                                           .momentum(config.momentum));

  int since_best = 0;
  double best_iou = -1.0;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next_u64() % i]);

    model->train();
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<TrainSample> augmented;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(config.batch_size)); ++i) {
        augmented.push_back(augment(train_set[order[i]], sample_augmentation(config.augmentation, rng)));
      }
      std::vector<const TrainSample*> ptrs;
      for (const auto& s : augmented) ptrs.push_back(&s);
      const Batch batch = make_batch(ptrs);

      optimizer.zero_grad();
      auto loss = batch_loss(model, batch, config);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::kNonFiniteLoss,
                    "epoch " + std::to_string(epoch) + ", batch [" + join(batch.ids) + "]");
      }
      loss.backward();
      if (config.grad_clip_norm > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip_norm);
      optimizer.step();
      epoch_loss += value * static_cast<double>(ptrs.size());
      seen += ptrs.size();
    }

    const EvalReport report = validate(model, eval_set, config.threshold, config.batch_size);
    EpochStats stats{epoch, epoch_loss / static_cast<double>(seen), report.iou, report.f1};
    record.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);

    if (report.iou > best_iou) {
      best_iou = report.iou;
      const fs::path previous = record.best_checkpoint;
      record.best_checkpoint = save(epoch, &report);
      record.best_epoch = epoch;
      record.best_val_iou = report.iou;
      record.best_val_f1 = report.f1;
      if (!config.keep_epoch_checkpoints && !previous.empty() && previous != record.best_checkpoint) {
        fs::remove(previous);
      }
      since_best = 0;
    } else {
      if (config.keep_epoch_checkpoints) save(epoch, &report);
      if (config.early_stop_patience > 0 && ++since_best >= config.early_stop_patience) break;
    }
  }

  if (record.best_epoch > 0) load_weights(model, record.best_checkpoint);
  model->eval();
  record.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  std::ofstream out(out_dir / "train_record.json");
  out << to_json(record).dump(2) << '\n';
  return record;
}

}  // namespace caveline
