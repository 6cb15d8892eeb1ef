#include "caveline/weaksup.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "caveline/error.hpp"

namespace caveline {

using json = nlohmann::json;

std::string to_string(Decision decision) {
  switch (decision) {
    case Decision::kAccept: return "ACCEPT";
    case Decision::kReject: return "REJECT";
    case Decision::kRejectWithAnnotation: return "REJECT_WITH_ANNOTATION";
  }
  return "REJECT";
}

Decision parse_decision(const std::string& text) {
  if (text == "ACCEPT") return Decision::kAccept;
  if (text == "REJECT") return Decision::kReject;
  if (text == "REJECT_WITH_ANNOTATION") return Decision::kRejectWithAnnotation;
  throw Error(ErrorCode::kInvalidArgument, "unknown decision '" + text + "'");
}

json to_json(const VerdictRecord& r) {
  json doc = {{"sample_id", r.sample_id}, {"decision", to_string(r.decision)}, {"phase", r.phase},
              {"reviewer", r.reviewer},   {"session", r.session},                {"timestamp", r.timestamp}};
  if (!r.mask.empty()) doc["mask"] = r.mask;
  return doc;
}

VerdictRecord verdict_record_from_json(const json& doc) {
  VerdictRecord r;
  r.sample_id = doc.at("sample_id").get<std::string>();
  r.decision = parse_decision(doc.at("decision").get<std::string>());
  r.phase = doc.at("phase").get<int>();
  r.reviewer = doc.value("reviewer", "");
  r.session = doc.value("session", "");
  r.timestamp = doc.value("timestamp", "");
  r.mask = doc.value("mask", "");
  return r;
}

json to_json(const PoolCounts& c) {
  return {{"labeled", c.labeled}, {"weak", c.weak}, {"negative", c.negative}, {"pending", c.pending}};
}

namespace {

PoolCounts pool_counts_from_json(const json& doc) {
  return {doc.at("labeled").get<std::size_t>(), doc.at("weak").get<std::size_t>(),
          doc.at("negative").get<std::size_t>(), doc.at("pending").get<std::size_t>()};
}

bool moves_sample(Decision d) { return d != Decision::kReject; }

// Transition for a record that has already been validated.
void apply_record(PhaseState& state, const VerdictRecord& record, const std::string& checkpoint) {
  state.decided_this_phase.insert(record.sample_id);
  if (record.decision == Decision::kAccept) {
    state.pending.erase(record.sample_id);
    state.weak.insert(record.sample_id);
    state.weak_masks[record.sample_id] = {record.mask, checkpoint, record.phase};
    state.dirty = true;
  } else if (record.decision == Decision::kRejectWithAnnotation) {
    state.pending.erase(record.sample_id);
    state.negative.insert(record.sample_id);
    state.negative_masks[record.sample_id] = record.mask;
    state.dirty = true;
  }
  state.verdict_log.push_back(record);
}

std::string relative_to(const fs::path& path, const fs::path& base) {
  return fs::absolute(path).lexically_normal().lexically_relative(fs::absolute(base).lexically_normal()).generic_string();
}

void write_atomically(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Appends lines and forces them to disk before returning.
void append_durably(const fs::path& path, const std::string& lines) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::size_t written = 0;
  while (written < lines.size()) {
    const ssize_t n = ::write(fd, lines.data() + written, lines.size() - written);
    if (n <= 0) {
      ::close(fd);
      throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
    }
    written += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

void check_mask_shape(const cv::Mat& mask, cv::Size raster, const std::string& id) {
  if (mask.type() != CV_8UC1 || mask.size() != raster) {
    throw Error(ErrorCode::kShapeMismatch, "corrected mask for " + id + " must be " + std::to_string(raster.width) +
                                               "x" + std::to_string(raster.height) + " CV_8UC1");
  }
  double lo, hi;
  cv::minMaxLoc(mask, &lo, &hi);
  if (hi > 1.0) throw Error(ErrorCode::kInvalidArgument, "corrected mask for " + id + " must hold 0/1");
}

json line_to_json(const std::optional<LineSegment>& line) { return line ? to_json(*line) : json(nullptr); }

}  // namespace

void check_verdicts(const PhaseState& state, const std::vector<Verdict>& verdicts) {
  std::set<std::string> seen;
  for (const auto& v : verdicts) {
    if (!seen.insert(v.sample_id).second) {
      throw Error(ErrorCode::kDuplicateVerdict, v.sample_id + " appears twice in one batch");
    }
    if (state.decided_this_phase.count(v.sample_id)) {
      throw Error(ErrorCode::kDuplicateVerdict, v.sample_id + " already has a verdict in phase " +
                                                    std::to_string(state.phase_index));
    }
    if (!state.pending.count(v.sample_id)) throw Error(ErrorCode::kUnknownSample, v.sample_id + " is not pending");
    if (v.decision == Decision::kRejectWithAnnotation && (!v.corrected_mask || v.corrected_mask->empty())) {
      throw Error(ErrorCode::kInvalidArgument, v.sample_id + ": REJECT_WITH_ANNOTATION requires a corrected mask");
    }
  }
}

void apply_verdicts(PhaseState& state, const std::vector<Verdict>& verdicts,
                    const std::map<std::string, std::string>& mask_paths, const std::string& timestamp) {
  check_verdicts(state, verdicts);
  for (const auto& v : verdicts) {
    if (moves_sample(v.decision) && !mask_paths.count(v.sample_id)) {
      throw Error(ErrorCode::kInvalidArgument, "no stored mask for " + v.sample_id);
    }
  }
  for (const auto& v : verdicts) {
    VerdictRecord record{v.sample_id, v.decision, state.phase_index, v.reviewer, v.session, timestamp, {}};
    if (moves_sample(v.decision)) record.mask = mask_paths.at(v.sample_id);
    apply_record(state, record, state.checkpoint);
  }
}

// ---------------------------------------------------------------------------

TorchBackend::TorchBackend(ModelConfig model, TrainConfig train, EpochCallback on_epoch)
    : model_(std::move(model)), train_(std::move(train)), on_epoch_(std::move(on_epoch)) {}

fs::path TorchBackend::train(int phase, const std::vector<TrainSample>& train_set,
                             const std::vector<TrainSample>& val_set, const std::optional<fs::path>& warm_start,
                             const fs::path& out_dir) {
  CaveLineNet model = warm_start ? load_checkpoint(*warm_start).model : build_model(model_);
  TrainConfig cfg = train_;
  cfg.phase = phase;
  cfg.seed = train_.seed + static_cast<std::uint64_t>(phase);
  const TrainRecord record = caveline::train(model, train_set, val_set, cfg, out_dir, on_epoch_);
  cached_path_.clear();
  return record.best_checkpoint;
}

cv::Mat TorchBackend::predict(const fs::path& checkpoint, const std::string&, const cv::Mat& image) {
  if (!cached_ || cached_path_ != checkpoint) {
    cached_ = load_checkpoint(checkpoint).model;
    cached_path_ = checkpoint;
  }
  return predict_image(cached_, image);
}

// ---------------------------------------------------------------------------

void WeakSupConfig::validate() const {
  model.validate();
  train.validate();
  hough.validate();
  if (model.input_width != raster_width || model.input_height != raster_height) {
    throw Error(ErrorCode::kInvalidConfig, "model input size must equal the weak-supervision raster");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorCode::kInvalidConfig, "threshold must lie in (0,1)");
  if (labeled_weight < 0 || weak_weight < 0 || negative_weight < 0) {
    throw Error(ErrorCode::kInvalidConfig, "pool weights must be non-negative");
  }
}

json to_json(const WeakSupConfig& c) {
  json doc = {{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"raster", {c.raster_width, c.raster_height}},
              {"threshold", c.threshold},
              {"hough", to_json(c.hough)},
              {"pool_weights", {{"labeled", c.labeled_weight}, {"weak", c.weak_weight}, {"negative", c.negative_weight}}},
              {"warm_start", c.warm_start}};
  doc["held_out_location"] = c.held_out_location ? json(*c.held_out_location) : json(nullptr);
  return doc;
}

WeakSupConfig weaksup_config_from_json(const json& doc) {
  WeakSupConfig c;
  try {
    if (doc.contains("model")) c.model = model_config_from_json(doc["model"]);
    if (doc.contains("train")) c.train = train_config_from_json(doc["train"]);
    if (doc.contains("raster")) {
      c.raster_width = doc["raster"].at(0).get<int>();
      c.raster_height = doc["raster"].at(1).get<int>();
    } else {
      c.raster_width = c.model.input_width;
      c.raster_height = c.model.input_height;
    }
    c.threshold = doc.value("threshold", c.threshold);
    if (doc.contains("hough")) c.hough = hough_config_from_json(doc["hough"]);
    if (doc.contains("pool_weights")) {
      const auto& w = doc["pool_weights"];
      c.labeled_weight = w.value("labeled", c.labeled_weight);
      c.weak_weight = w.value("weak", c.weak_weight);
      c.negative_weight = w.value("negative", c.negative_weight);
    }
    c.warm_start = doc.value("warm_start", c.warm_start);
    if (doc.contains("held_out_location") && !doc["held_out_location"].is_null()) {
      c.held_out_location = doc["held_out_location"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("weaksup config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const ReviewItem& item) {
  return {{"sample_id", item.sample_id},
          {"image", item.image},
          {"mask", item.mask},
          {"overlay", item.overlay},
          {"dominant_line", line_to_json(item.dominant_line)}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto millis = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof(out), "%s.%03lldZ", buf, static_cast<long long>(millis));
  return out;
}

// ---------------------------------------------------------------------------

fs::path Orchestrator::phase_dir(int k) const { return dir_ / "phases" / ("phase" + std::to_string(k)); }

fs::path Orchestrator::checkpoint_path() const {
  if (state_.checkpoint.empty()) throw Error(ErrorCode::kNoCheckpoint, "phase " + std::to_string(state_.phase_index));
  return dir_ / state_.checkpoint;
}

void Orchestrator::load_manifest_and_splits() {
  manifest_ = load_manifest(manifest_path_);
  test_ids_.clear();
  val_ids_.clear();
  const auto& held = config_.held_out_location;
  if (held) {
    const bool known = std::any_of(manifest_.samples.begin(), manifest_.samples.end(),
                                   [&](const ManifestEntry& e) { return e.location_tag == *held; });
    if (!known) throw Error(ErrorCode::kInvalidArgument, "no samples at held-out location '" + *held + "'");
  }
  for (const auto& e : manifest_.samples) {
    if (held) {
      if (e.location_tag == *held) {
        test_ids_.push_back(e.id);
      } else if (e.split == Split::kVal) {
        val_ids_.push_back(e.id);
      }
    } else if (e.split == Split::kTest) {
      test_ids_.push_back(e.id);
    } else if (e.split == Split::kVal) {
      val_ids_.push_back(e.id);
    }
  }
}

Orchestrator Orchestrator::start(const fs::path& state_dir, const fs::path& manifest_path,
                                 const std::vector<std::string>& seed_ids, const WeakSupConfig& config,
                                 std::shared_ptr<PhaseBackend> backend) {
  config.validate();
  if (!backend) throw Error(ErrorCode::kInvalidArgument, "no training backend");
  if (fs::exists(state_dir / "state.json")) {
    throw Error(ErrorCode::kInvalidArgument, "state already initialized at " + state_dir.string());
  }
  Orchestrator o;
  o.dir_ = fs::absolute(state_dir);
  o.manifest_path_ = fs::absolute(manifest_path);
  o.config_ = config;
  o.backend_ = std::move(backend);
  o.clock_ = utc_timestamp;
  o.load_manifest_and_splits();

  if (seed_ids.empty()) throw Error(ErrorCode::kEmptySeed, "no seed labels given");
  std::set<std::string> candidates;
  for (const auto& e : o.manifest_.samples) {
    if (e.split != Split::kTrain) continue;
    if (config.held_out_location && e.location_tag == *config.held_out_location) continue;
    candidates.insert(e.id);
  }
  o.state_.held_out_location = config.held_out_location;
  for (const auto& id : seed_ids) {
    if (!candidates.count(id)) throw Error(ErrorCode::kUnknownSample, "seed " + id + " is not a train-side sample");
    const ManifestEntry* e = o.manifest_.find(id);
    if (!e->mask || e->label_kind != LabelKind::kHuman) {
      throw Error(ErrorCode::kInvalidArgument, "seed " + id + " has no human mask");
    }
    if (!o.state_.labeled.insert(id).second) throw Error(ErrorCode::kDuplicateId, "seed " + id + " listed twice");
  }
  for (const auto& id : candidates) {
    if (!o.state_.labeled.count(id)) o.state_.pending.insert(id);
  }

  fs::create_directories(o.dir_ / "phases");
  o.state_.phase_index = 0;
  AdvancePlan plan;
  plan.next_phase = 1;
  for (const auto& id : o.state_.labeled) plan.train_set.push_back(o.training_sample(id, config.labeled_weight));
  for (const auto& id : o.val_ids_) plan.val_set.push_back(o.training_sample(id, 1.0));
  const AdvanceOutcome outcome = o.run_advance(plan);
  o.commit_advance(outcome);
  // the initial training does not count as a pool change
  o.state_.dirty = false;
  o.save_state();
  return o;
}

Orchestrator Orchestrator::open(const fs::path& state_dir, std::shared_ptr<PhaseBackend> backend) {
  const fs::path state_file = state_dir / "state.json";
  if (!fs::exists(state_file)) throw Error(ErrorCode::kMissingFile, state_file.string());
  json doc;
  try {
    std::ifstream in(state_file);
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, "corrupt state file: " + std::string(e.what()));
  }

  Orchestrator o;
  o.dir_ = fs::absolute(state_dir);
  o.backend_ = std::move(backend);
  o.clock_ = utc_timestamp;
  try {
    o.manifest_path_ = doc.at("manifest").get<std::string>();
    o.config_ = weaksup_config_from_json(doc.at("config"));
    auto& s = o.state_;
    s.phase_index = doc.at("phase_index").get<int>();
    s.checkpoint = doc.value("checkpoint", "");
    s.dirty = doc.value("dirty", false);
    s.held_out_location = o.config_.held_out_location;
    const auto& pools = doc.at("pools");
    for (const auto& id : pools.at("labeled")) s.labeled.insert(id.get<std::string>());
    for (const auto& id : pools.at("weak")) s.weak.insert(id.get<std::string>());
    for (const auto& id : pools.at("negative")) s.negative.insert(id.get<std::string>());
    for (const auto& id : pools.at("pending")) s.pending.insert(id.get<std::string>());
    for (const auto& [id, w] : doc.at("weak_masks").items()) {
      s.weak_masks[id] = {w.at("path").get<std::string>(), w.at("checkpoint").get<std::string>(), w.at("phase").get<int>()};
    }
    for (const auto& [id, path] : doc.at("negative_masks").items()) s.negative_masks[id] = path.get<std::string>();
    for (const auto& h : doc.at("history")) {
      PhaseRecord r;
      r.index = h.at("index").get<int>();
      r.checkpoint = h.at("checkpoint").get<std::string>();
      r.pools = pool_counts_from_json(h.at("pools"));
      r.metrics = eval_report_from_json(h.at("metrics"));
      s.history.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, "corrupt state file: " + std::string(e.what()));
  }
  o.load_manifest_and_splits();

  // Replay the write-ahead log: records past `log_applied` were acknowledged
  // but the state snapshot did not make it to disk.
  const std::size_t applied = doc.value("log_applied", std::size_t{0});
  std::ifstream log(o.dir_ / "verdicts.jsonl");
  std::string line;
  std::size_t index = 0;
  bool replayed = false;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    VerdictRecord record;
    try {
      record = verdict_record_from_json(json::parse(line));
    } catch (const std::exception&) {
      break;  // torn final line from an interrupted append
    }
    if (index++ < applied) {
      o.state_.verdict_log.push_back(record);
      if (record.phase == o.state_.phase_index) o.state_.decided_this_phase.insert(record.sample_id);
      continue;
    }
    if (record.phase != o.state_.phase_index || !o.state_.pending.count(record.sample_id) ||
        o.state_.decided_this_phase.count(record.sample_id)) {
      throw Error(ErrorCode::kIoFailure, "verdict log does not replay onto state: " + line);
    }
    apply_record(o.state_, record, o.state_.checkpoint);
    replayed = true;
  }
  if (index < applied) throw Error(ErrorCode::kIoFailure, "verdict log is shorter than the state snapshot");
  if (replayed) o.save_state();
  return o;
}

void Orchestrator::save_state() const {
  json pools = {{"labeled", state_.labeled}, {"weak", state_.weak}, {"negative", state_.negative},
                {"pending", state_.pending}};
  json weak_masks = json::object();
  for (const auto& [id, w] : state_.weak_masks) {
    weak_masks[id] = {{"path", w.path}, {"checkpoint", w.checkpoint}, {"phase", w.phase}};
  }
  json history = json::array();
  for (const auto& h : state_.history) {
    history.push_back({{"index", h.index}, {"checkpoint", h.checkpoint}, {"pools", to_json(h.pools)},
                       {"metrics", to_json(h.metrics)}});
  }
  const json doc = {{"version", 1},
                    {"manifest", manifest_path_.string()},
                    {"config", to_json(config_)},
                    {"phase_index", state_.phase_index},
                    {"checkpoint", state_.checkpoint},
                    {"dirty", state_.dirty},
                    {"pools", pools},
                    {"weak_masks", weak_masks},
                    {"negative_masks", state_.negative_masks},
                    {"history", history},
                    {"log_applied", state_.verdict_log.size()}};
  write_atomically(dir_ / "state.json", doc.dump(2) + "\n");
}

TrainSample Orchestrator::training_sample(const std::string& id, double weight) const {
  const ManifestEntry* entry = manifest_.find(id);
  if (!entry) throw Error(ErrorCode::kUnknownSample, id);
  TrainSample sample;
  sample.id = id;
  sample.weight = weight;
  if (auto it = state_.weak_masks.find(id); it != state_.weak_masks.end() && state_.weak.count(id)) {
    sample.image = load_sample(manifest_, *entry, config_.raster()).image;
    sample.mask = read_mask(dir_ / it->second.path);
  } else if (auto neg = state_.negative_masks.find(id); neg != state_.negative_masks.end() && state_.negative.count(id)) {
    sample.image = load_sample(manifest_, *entry, config_.raster()).image;
    sample.mask = read_mask(dir_ / neg->second);
  } else {
    ImageSample loaded = load_sample(manifest_, *entry, config_.raster());
    if (!loaded.mask) throw Error(ErrorCode::kInvalidArgument, "sample " + id + " has no mask");
    sample.image = loaded.image;
    sample.mask = *loaded.mask;
  }
  return sample;
}

EvalReport Orchestrator::evaluate(const fs::path& checkpoint) {
  std::vector<SampleScore> scores;
  for (const auto& id : test_ids_) {
    const ImageSample s = load_sample(manifest_, *manifest_.find(id), config_.raster());
    if (!s.mask) continue;
    const cv::Mat pred = binarize(backend_->predict(checkpoint, id, s.image), config_.threshold);
    scores.push_back(score_sample(id, pred, *s.mask));
  }
  EvalReport report = EvalReport::from_scores(std::move(scores));
  std::set<std::string> locations;
  for (const auto& e : manifest_.samples) {
    if (!config_.held_out_location || e.location_tag != *config_.held_out_location) locations.insert(e.location_tag);
  }
  report.train_sets.assign(locations.begin(), locations.end());
  report.test_set = config_.held_out_location.value_or("TEST");
  return report;
}

std::optional<ReviewItem> Orchestrator::review_item(const std::string& id) {
  const ManifestEntry* entry = manifest_.find(id);
  if (!entry) return std::nullopt;
  const fs::path review = phase_dir(state_.phase_index) / "review";
  ReviewItem item;
  item.sample_id = id;
  item.image = manifest_.image_path(*entry).string();
  item.mask = relative_to(review / (id + "_mask.png"), dir_);
  item.overlay = relative_to(review / (id + "_overlay.png"), dir_);
  const fs::path meta = review / (id + ".json");
  if (fs::exists(meta) && fs::exists(dir_ / item.mask) && fs::exists(dir_ / item.overlay)) {
    std::ifstream in(meta);
    const json doc = json::parse(in);
    if (!doc["dominant_line"].is_null()) item.dominant_line = line_segment_from_json(doc["dominant_line"]);
    return item;
  }
  const fs::path ckpt = checkpoint_path();
  fs::create_directories(review);
  const cv::Mat image = load_sample(manifest_, *entry, config_.raster()).image;
  const cv::Mat mask = binarize(backend_->predict(ckpt, id, image), config_.threshold);
  item.dominant_line = dominant_line(mask, config_.hough);
  write_mask(dir_ / item.mask, mask);
  if (!cv::imwrite((dir_ / item.overlay).string(), render_overlay(image, mask, item.dominant_line))) {
    throw Error(ErrorCode::kIoFailure, "cannot write " + item.overlay);
  }
  write_atomically(meta, json{{"dominant_line", line_to_json(item.dominant_line)}, {"checkpoint", state_.checkpoint}}
                             .dump());
  return item;
}

std::vector<ReviewItem> Orchestrator::emit_review_batch() {
  checkpoint_path();
  std::vector<ReviewItem> items;
  items.reserve(state_.pending.size());
  for (const auto& id : state_.pending) items.push_back(*review_item(id));
  return items;
}

void Orchestrator::ingest_verdicts(const std::vector<Verdict>& verdicts) {
  check_verdicts(state_, verdicts);
  for (const auto& v : verdicts) {
    if (v.decision == Decision::kRejectWithAnnotation) check_mask_shape(*v.corrected_mask, config_.raster(), v.sample_id);
  }

  std::map<std::string, std::string> mask_paths;
  const fs::path phase = phase_dir(state_.phase_index);
  for (const auto& v : verdicts) {
    if (v.decision == Decision::kAccept) {
      const ReviewItem item = *review_item(v.sample_id);
      const fs::path target = phase / "weak" / (v.sample_id + ".png");
      fs::create_directories(target.parent_path());
      fs::copy_file(dir_ / item.mask, target, fs::copy_options::overwrite_existing);
      mask_paths[v.sample_id] = relative_to(target, dir_);
    } else if (v.decision == Decision::kRejectWithAnnotation) {
      const fs::path target = phase / "negative" / (v.sample_id + ".png");
      fs::create_directories(target.parent_path());
      write_mask(target, *v.corrected_mask);
      mask_paths[v.sample_id] = relative_to(target, dir_);
    }
  }

  PhaseState next = state_;
  const std::size_t before = next.verdict_log.size();
  apply_verdicts(next, verdicts, mask_paths, clock_());
  std::string lines;
  for (std::size_t i = before; i < next.verdict_log.size(); ++i) lines += to_json(next.verdict_log[i]).dump() + "\n";
  if (!lines.empty()) append_durably(dir_ / "verdicts.jsonl", lines);
  state_ = std::move(next);
  save_state();
}

AdvancePlan Orchestrator::plan_advance() const {
  if (state_.checkpoint.empty()) throw Error(ErrorCode::kNoCheckpoint, "no model to warm-start from");
  if (!state_.dirty) {
    throw Error(ErrorCode::kNothingNew, "no pool change since phase " + std::to_string(state_.phase_index) +
                                            " was trained");
  }
  AdvancePlan plan;
  plan.next_phase = state_.phase_index + 1;
  for (const auto& id : state_.labeled) plan.train_set.push_back(training_sample(id, config_.labeled_weight));
  for (const auto& id : state_.weak) plan.train_set.push_back(training_sample(id, config_.weak_weight));
  for (const auto& id : state_.negative) plan.train_set.push_back(training_sample(id, config_.negative_weight));
  for (const auto& id : val_ids_) plan.val_set.push_back(training_sample(id, 1.0));
  if (config_.warm_start) plan.warm_start = dir_ / state_.checkpoint;
  plan.log_size = state_.verdict_log.size();
  return plan;
}

AdvanceOutcome Orchestrator::run_advance(const AdvancePlan& plan) {
  AdvanceOutcome outcome;
  outcome.phase = plan.next_phase;
  outcome.log_size = plan.log_size;
  outcome.checkpoint = backend_->train(plan.next_phase, plan.train_set, plan.val_set, plan.warm_start,
                                       phase_dir(plan.next_phase) / "train");
  outcome.metrics = evaluate(outcome.checkpoint);
  outcome.metrics.phase = plan.next_phase;
  return outcome;
}

void Orchestrator::commit_advance(const AdvanceOutcome& outcome) {
  if (outcome.phase != state_.phase_index + 1 || outcome.log_size != state_.verdict_log.size()) {
    throw Error(ErrorCode::kInvalidArgument, "advance outcome is stale");
  }
  PhaseRecord record;
  record.index = outcome.phase;
  record.checkpoint = relative_to(outcome.checkpoint, dir_);
  record.pools = state_.counts();
  record.metrics = outcome.metrics;
  state_.history.push_back(record);
  state_.phase_index = outcome.phase;
  state_.checkpoint = record.checkpoint;
  state_.decided_this_phase.clear();
  state_.dirty = false;
  save_state();
}

void Orchestrator::advance_phase() { commit_advance(run_advance(plan_advance())); }

json Orchestrator::export_phase(int k) const {
  if (k < 1 || k > state_.phase_index) throw Error(ErrorCode::kInvalidArgument, "no phase " + std::to_string(k));
  json samples = json::array();
  for (const auto& r : state_.verdict_log) {
    if (r.phase != k || !moves_sample(r.decision)) continue;
    const ManifestEntry* e = manifest_.find(r.sample_id);
    samples.push_back({{"id", r.sample_id},
                       {"image", relative_to(manifest_.image_path(*e), dir_)},
                       {"mask", r.mask},
                       {"label_kind", to_string(r.decision == Decision::kAccept ? LabelKind::kWeakPositive
                                                                                 : LabelKind::kNegativeRelabeled)},
                       {"location_tag", e->location_tag},
                       {"split", to_string(e->split)}});
  }
  return {{"name", manifest_.name + "-phase" + std::to_string(k)}, {"phase", k}, {"samples", samples}};
}

// ---------------------------------------------------------------------------

std::vector<Verdict> OracleReviewer::review(const std::vector<ReviewItem>& batch, const Orchestrator& orch) const {
  std::vector<Verdict> verdicts;
  Rng rng(seed);
  for (const auto& item : batch) {
    const ManifestEntry* entry = orch.manifest().find(item.sample_id);
    if (!entry) throw Error(ErrorCode::kUnknownSample, item.sample_id);
    const ImageSample truth = load_sample(orch.manifest(), *entry, orch.config().raster());
    if (!truth.mask) throw Error(ErrorCode::kInvalidArgument, "oracle needs ground truth for " + item.sample_id);
    const cv::Mat pred = read_mask(orch.dir() / item.mask);
    Verdict v;
    v.sample_id = item.sample_id;
    v.reviewer = name;
    v.session = name;
    const double draw = rng.uniform();
    if (iou(pred, *truth.mask) >= tau) {
      v.decision = Decision::kAccept;
    } else if (draw < annotate_fraction) {
      v.decision = Decision::kRejectWithAnnotation;
      v.corrected_mask = *truth.mask;
    } else {
      v.decision = Decision::kReject;
    }
    verdicts.push_back(std::move(v));
  }
  return verdicts;
}

OracleReviewer parse_oracle_reviewer(const std::string& text) {
  OracleReviewer reviewer;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "oracle option '" + part + "' needs key=value");
    const std::string key = part.substr(0, eq), value = part.substr(eq + 1);
    try {
      if (key == "tau") {
        reviewer.tau = std::stod(value);
      } else if (key == "annotate") {
        reviewer.annotate_fraction = std::stod(value);
      } else if (key == "seed") {
        reviewer.seed = std::stoull(value);
      } else if (key == "name") {
        reviewer.name = value;
      } else {
        throw Error(ErrorCode::kInvalidArgument, "unknown oracle option '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, "bad value for oracle option '" + key + "'");
    }
  }
  if (!(reviewer.tau >= 0.0 && reviewer.tau <= 1.0) || reviewer.annotate_fraction < 0.0 ||
      reviewer.annotate_fraction > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "oracle tau and annotate must lie in [0,1]");
  }
  return reviewer;
}

}  // namespace caveline
