#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "caveline/data.hpp"
#include "caveline/metrics.hpp"
#include "caveline/model.hpp"
#include "caveline/postproc.hpp"
#include "caveline/trainer.hpp"
#include "json.hpp"

namespace caveline {

enum class Decision { kAccept, kReject, kRejectWithAnnotation };

std::string to_string(Decision decision);
Decision parse_decision(const std::string& text);

struct Verdict {
  std::string sample_id;
  Decision decision = Decision::kReject;
  std::optional<cv::Mat> corrected_mask;  // required for kRejectWithAnnotation
  std::string reviewer;
  std::string session;
};

/// One line of the append-only verdict log.
struct VerdictRecord {
  std::string sample_id;
  Decision decision = Decision::kReject;
  int phase = 1;
  std::string reviewer;
  std::string session;
  std::string timestamp;  // ISO 8601 UTC
  std::string mask;       // stored mask, relative to the state directory; empty for REJECT
};

nlohmann::json to_json(const VerdictRecord& record);
VerdictRecord verdict_record_from_json(const nlohmann::json& doc);

struct PoolCounts {
  std::size_t labeled = 0, weak = 0, negative = 0, pending = 0;
  std::size_t total() const { return labeled + weak + negative + pending; }
};

nlohmann::json to_json(const PoolCounts& counts);

/// Summary of a completed training round.
struct PhaseRecord {
  int index = 1;
  std::string checkpoint;  // relative to the state directory
  PoolCounts pools;        // pools the phase's model was trained on (pending at that time)
  EvalReport metrics;      // held-out test evaluation
};

struct WeakMask {
  std::string path;        // relative to the state directory
  std::string checkpoint;  // checkpoint whose prediction produced it
  int phase = 1;
};

struct PhaseState {
  int phase_index = 1;
  std::set<std::string> labeled, weak, negative, pending;
  std::string checkpoint;  // current phase model, relative to the state directory
  std::vector<PhaseRecord> history;
  std::vector<VerdictRecord> verdict_log;
  std::optional<std::string> held_out_location;
  std::map<std::string, WeakMask> weak_masks;
  std::map<std::string, std::string> negative_masks;  // id -> relative path
  std::set<std::string> decided_this_phase;
  bool dirty = false;  // pools changed since the last training round

  PoolCounts counts() const { return {labeled.size(), weak.size(), negative.size(), pending.size()}; }
};

/// Validates a batch against `state` and applies it atomically: either every
/// verdict is applied or the state is left untouched and an Error is thrown
/// (UnknownSample, DuplicateVerdict, InvalidArgument). ACCEPT moves a sample to
/// the weak pool, REJECT_WITH_ANNOTATION to the negative pool, REJECT keeps it
/// pending. Every verdict appends exactly one log record. `mask_paths` gives
/// the stored mask for each ACCEPT / annotated id.
void apply_verdicts(PhaseState& state, const std::vector<Verdict>& verdicts,
                    const std::map<std::string, std::string>& mask_paths, const std::string& timestamp);

/// Checks a batch without applying it.
void check_verdicts(const PhaseState& state, const std::vector<Verdict>& verdicts);

// ---------------------------------------------------------------------------
// Training / inference backend

class PhaseBackend {
 public:
  virtual ~PhaseBackend() = default;
  /// Trains one phase; `warm_start` is the previous phase checkpoint (absolute
  /// path) when retraining. Returns the path of the resulting checkpoint.
  virtual std::filesystem::path train(int phase, const std::vector<TrainSample>& train_set,
                                      const std::vector<TrainSample>& val_set,
                                      const std::optional<std::filesystem::path>& warm_start,
                                      const std::filesystem::path& out_dir) = 0;
  /// Probability map (CV_32FC1) for one image.
  virtual cv::Mat predict(const std::filesystem::path& checkpoint, const std::string& sample_id,
                          const cv::Mat& image) = 0;
};

/// CaveLineNet backend built on `train()` and `predict_image()`.
class TorchBackend : public PhaseBackend {
 public:
  TorchBackend(ModelConfig model, TrainConfig train, EpochCallback on_epoch = {});
  std::filesystem::path train(int phase, const std::vector<TrainSample>& train_set,
                              const std::vector<TrainSample>& val_set,
                              const std::optional<std::filesystem::path>& warm_start,
                              const std::filesystem::path& out_dir) override;
  cv::Mat predict(const std::filesystem::path& checkpoint, const std::string& sample_id, const cv::Mat& image) override;

 private:
  ModelConfig model_;
  TrainConfig train_;
  EpochCallback on_epoch_;
  std::filesystem::path cached_path_;
  CaveLineNet cached_{nullptr};
};

// ---------------------------------------------------------------------------
// Orchestrator

struct WeakSupConfig {
  ModelConfig model;
  TrainConfig train;
  std::optional<std::string> held_out_location;  // leave-one-out mode
  int raster_width = kWorkingWidth;
  int raster_height = kWorkingHeight;
  double threshold = 0.5;
  HoughConfig hough;
  // Per-pool loss weights.
  double labeled_weight = 1.0;
  double weak_weight = 1.0;
  double negative_weight = 1.0;
  bool warm_start = true;

  cv::Size raster() const { return {raster_width, raster_height}; }
  void validate() const;
};

nlohmann::json to_json(const WeakSupConfig& config);
WeakSupConfig weaksup_config_from_json(const nlohmann::json& doc);

struct ReviewItem {
  std::string sample_id;
  std::string image;    // absolute path of the source image
  std::string mask;     // predicted binary mask PNG, relative to the state directory
  std::string overlay;  // overlay PNG, relative to the state directory
  std::optional<LineSegment> dominant_line;
};

nlohmann::json to_json(const ReviewItem& item);

/// Trained model awaiting commit; produced without touching the state.
struct AdvancePlan {
  int next_phase = 0;
  std::vector<TrainSample> train_set, val_set;
  std::optional<std::filesystem::path> warm_start;
  std::size_t log_size = 0;  // verdicts covered by the plan
};

struct AdvanceOutcome {
  int phase = 0;
  std::filesystem::path checkpoint;
  EvalReport metrics;
  std::size_t log_size = 0;
};

/// Owns a PhaseState persisted under a state directory:
///   state.json                     pools, history, config (atomic rewrite)
///   verdicts.jsonl                 append-only verdict log, written ahead
///   phases/phase{K}/review/        predicted masks and overlays
///   phases/phase{K}/weak/          accepted model masks
///   phases/phase{K}/negative/      human corrected masks
///   phases/phase{K}/train/         checkpoints and training record
/// Not thread-safe; callers serialize access.
class Orchestrator {
 public:
  using Clock = std::function<std::string()>;

  /// start_phase: phase 1 with `seed_ids` labeled and the remaining train-side
  /// ids pending; trains and evaluates the initial model.
  static Orchestrator start(const std::filesystem::path& state_dir, const std::filesystem::path& manifest_path,
                            const std::vector<std::string>& seed_ids, const WeakSupConfig& config,
                            std::shared_ptr<PhaseBackend> backend);
  /// Loads state.json and replays verdict log lines written after it.
  static Orchestrator open(const std::filesystem::path& state_dir, std::shared_ptr<PhaseBackend> backend);

  const PhaseState& state() const { return state_; }
  const WeakSupConfig& config() const { return config_; }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path checkpoint_path() const;

  /// Ids used for held-out evaluation and for validation during training.
  const std::vector<std::string>& test_ids() const { return test_ids_; }
  const std::vector<std::string>& val_ids() const { return val_ids_; }

  /// Predictions for every pending sample (cached on disk per phase).
  std::vector<ReviewItem> emit_review_batch();
  std::optional<ReviewItem> review_item(const std::string& sample_id);

  /// Writes corrected/weak masks, appends the log (flushed) and saves state.
  void ingest_verdicts(const std::vector<Verdict>& verdicts);

  void advance_phase();
  AdvancePlan plan_advance() const;
  AdvanceOutcome run_advance(const AdvancePlan& plan);
  void commit_advance(const AdvanceOutcome& outcome);

  /// Manifest fragment of the labels produced while phase `k` was current.
  nlohmann::json export_phase(int k) const;

  void set_clock(Clock clock) { clock_ = std::move(clock); }

 private:
  Orchestrator() = default;
  void load_manifest_and_splits();
  void save_state() const;
  EvalReport evaluate(const std::filesystem::path& checkpoint);
  TrainSample training_sample(const std::string& id, double weight) const;
  std::filesystem::path phase_dir(int k) const;

  std::filesystem::path dir_;
  std::filesystem::path manifest_path_;
  WeakSupConfig config_;
  DatasetManifest manifest_;
  PhaseState state_;
  std::vector<std::string> test_ids_, val_ids_;
  std::shared_ptr<PhaseBackend> backend_;
  Clock clock_;
};

/// Simulated expert: accept when the prediction's IoU against ground truth is
/// at least `tau`; annotate a `annotate_fraction` of rejects with ground truth.
struct OracleReviewer {
  double tau = 0.7;
  double annotate_fraction = 1.0;
  std::uint64_t seed = 0;
  std::string name = "oracle";

  std::vector<Verdict> review(const std::vector<ReviewItem>& batch, const Orchestrator& orchestrator) const;
};

/// Parses "tau=0.7,annotate=0.5,seed=3".
OracleReviewer parse_oracle_reviewer(const std::string& text);

/// ISO 8601 UTC time of now.
std::string utc_timestamp();

}  // namespace caveline
