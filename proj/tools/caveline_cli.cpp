#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "caveline/error.hpp"
#include "caveline/service.hpp"
#include "caveline/weaksup.hpp"

using namespace caveline;
using json = nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIoFailure:
    case ErrorCode::kNonFiniteLoss: return kExitRuntime;
    default: return kExitValidation;
  }
}

// One machine-parsable line on stderr.
int fail(int exit_code, const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
  return exit_code;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingFile, path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& doc) {
  if (path.empty() || path == "-") {
    std::cout << doc.dump(2) << std::endl;
    return;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

cv::Size parse_raster(const std::string& text) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(text);
  if (!(in >> w >> x >> h) || x != 'x' || w <= 0 || h <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "raster must look like 960x540, got '" + text + "'");
  }
  return {w, h};
}

void log_epoch(const EpochStats& s) {
  std::cerr << json{{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"val_iou", s.val_iou}, {"val_f1", s.val_f1}}.dump()
            << std::endl;
}

// Model options shared by train and weaksup init.
struct ModelOptions {
  std::string variant = "light";
  std::string raster;
  std::string model_config;
  bool micro = false;

  void add(CLI::App* app) {
    app->add_option("--model", variant, "light or base")->check(CLI::IsMember({"light", "base", "LIGHT", "BASE"}));
    app->add_option("--raster", raster, "model input size WxH (default 960x540)");
    app->add_option("--model-config", model_config, "ModelConfig JSON overrides");
    app->add_flag("--micro", micro, "reduced-width model for CPU-scale runs");
  }

  ModelConfig build(std::optional<std::uint64_t> seed) const {
    const cv::Size size = raster.empty() ? cv::Size(kWorkingWidth, kWorkingHeight) : parse_raster(raster);
    const Variant v = parse_variant(variant);
    ModelConfig cfg = micro ? ModelConfig::micro(v, size.width, size.height)
                            : (v == Variant::kLight ? ModelConfig::light() : ModelConfig::base());
    if (!model_config.empty()) {
      json doc = to_json(cfg);
      doc.merge_patch(read_json(model_config));
      cfg = model_config_from_json(doc);
    }
    if (!raster.empty()) {
      cfg.input_width = size.width;
      cfg.input_height = size.height;
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kMissingFile, dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

void run_synth(const SynthArgs& a) {
  const json doc = read_json(a.spec);
  DatasetManifest manifest;
  if (doc.contains("locations")) {
    std::vector<SyntheticSpec> specs;
    for (const auto& s : doc["locations"]) {
      SyntheticSpec spec = synthetic_spec_from_json(s);
      if (a.seed) spec.seed += *a.seed;
      specs.push_back(spec);
    }
    manifest = generate_multi_location(specs, a.out, doc.value("name", "synthetic"));
  } else {
    SyntheticSpec spec = synthetic_spec_from_json(doc);
    if (a.seed) spec.seed = *a.seed;
    manifest = generate_synthetic(spec, a.out);
  }
  std::map<std::string, int> splits;
  for (const auto& e : manifest.samples) ++splits[to_string(e.split)];
  write_json("-", {{"manifest", (fs::path(a.out) / "manifest.json").string()},
                   {"samples", manifest.samples.size()},
                   {"splits", splits}});
}

struct TrainArgs {
  std::string manifest, config, out;
  ModelOptions model;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

void run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : train_config_from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.max_epochs = *a.epochs;
  cfg.validate();
  const ModelConfig model_cfg = a.model.build(a.seed);
  const DatasetManifest manifest = load_manifest(a.manifest);
  const cv::Size size(model_cfg.input_width, model_cfg.input_height);
  const auto train_set = load_train_samples(manifest, manifest.ids(Split::kTrain), size);
  const auto val_set = load_train_samples(manifest, manifest.ids(Split::kVal), size);
  CaveLineNet model = build_model(model_cfg);
  const TrainRecord record = train(model, train_set, val_set, cfg, a.out, log_epoch);
  write_json("-", to_json(record));
}

struct PredictArgs {
  std::string ckpt, images, out, hough_config;
  bool postprocess = false;
  double threshold = 0.5;
  std::optional<std::uint64_t> seed;
};

void run_predict(const PredictArgs& a) {
  if (!(a.threshold > 0.0 && a.threshold < 1.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must lie in (0,1)");
  HoughConfig hough = a.hough_config.empty() ? HoughConfig{} : hough_config_from_json(read_json(a.hough_config));
  if (a.seed) hough.seed = *a.seed;
  hough.validate();
  const auto images = list_images(a.images);
  LoadedCheckpoint ckpt = load_checkpoint(a.ckpt);
  const cv::Size model_size(ckpt.config.input_width, ckpt.config.input_height);
  fs::create_directories(a.out);
  json summary = json::array();
  for (const auto& path : images) {
    const cv::Mat rgb = read_rgb(path);
    cv::Mat input = rgb;
    if (rgb.size() != model_size) cv::resize(rgb, input, model_size, 0, 0, cv::INTER_AREA);
    cv::Mat prob = predict_image(ckpt.model, input);
    if (prob.size() != rgb.size()) cv::resize(prob, prob, rgb.size(), 0, 0, cv::INTER_LINEAR);
    const cv::Mat mask = binarize(prob, a.threshold);
    const std::string stem = path.stem().string();
    write_mask(fs::path(a.out) / (stem + ".png"), mask);
    json entry = {{"image", path.string()}, {"mask", (fs::path(a.out) / (stem + ".png")).string()}};
    if (a.postprocess) {
      const LineExtraction lines = extract_lines(mask, hough);
      write_json(fs::path(a.out) / (stem + "_lines.json"), to_json(lines));
      const fs::path overlay = fs::path(a.out) / (stem + "_overlay.png");
      if (!cv::imwrite(overlay.string(), render_overlay(rgb, mask, lines.dominant))) {
        throw Error(ErrorCode::kIoFailure, "cannot write " + overlay.string());
      }
      entry["dominant_line"] = lines.dominant ? to_json(*lines.dominant) : json(nullptr);
    }
    summary.push_back(entry);
  }
  write_json("-", {{"predictions", summary.size()}, {"out", a.out}});
}

struct EvalArgs {
  std::string pred, truth, report, split = "test", location;
};

void run_eval(const EvalArgs& a) {
  const DatasetManifest manifest = load_manifest(a.truth);
  std::string split = a.split;
  std::transform(split.begin(), split.end(), split.begin(), ::toupper);
  std::vector<SampleScore> scores;
  std::set<std::string> locations;
  for (const auto& e : manifest.samples) {
    if (split != "ALL" && to_string(e.split) != split) continue;
    if (!a.location.empty() && e.location_tag != a.location) continue;
    if (!e.mask) continue;
    const fs::path pred_path = fs::path(a.pred) / (e.image.stem().string() + ".png");
    if (!fs::exists(pred_path)) throw Error(ErrorCode::kMissingFile, "no prediction " + pred_path.string());
    scores.push_back(score_sample(e.id, read_mask(pred_path), read_mask(*manifest.mask_path(e))));
    locations.insert(e.location_tag);
  }
  if (scores.empty()) throw Error(ErrorCode::kEmptyDataset, "no labeled samples in split '" + a.split + "'");
  EvalReport report = EvalReport::from_scores(std::move(scores));
  report.test_set = a.location.empty() ? a.split : a.location;
  const json doc = to_json(report);
  if (!a.report.empty()) write_json(a.report, doc);
  write_json("-", {{"iou", doc["iou"]}, {"f1", doc["f1"]}, {"precision", doc["precision"]}, {"recall", doc["recall"]},
                   {"samples", report.per_sample.size()}});
}

// ---------------------------------------------------------------------------

std::shared_ptr<PhaseBackend> backend_for(const WeakSupConfig& config) {
  return std::make_shared<TorchBackend>(config.model, config.train, log_epoch);
}

Orchestrator open_state(const fs::path& state) {
  const json doc = read_json(state / "state.json");
  return Orchestrator::open(state, backend_for(weaksup_config_from_json(doc.at("config"))));
}

json phase_summary(const Orchestrator& o) {
  json phases = json::array();
  for (const auto& h : o.state().history) {
    phases.push_back({{"index", h.index}, {"checkpoint", h.checkpoint}, {"pools", to_json(h.pools)},
                      {"metrics", to_json(h.metrics)}});
  }
  return {{"current", o.state().phase_index}, {"pools", to_json(o.state().counts())}, {"phases", phases}};
}

struct InitArgs {
  std::string state, manifest, config, seeds, held_out;
  int seed_count = 0;
  ModelOptions model;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

void run_init(InitArgs a, CLI::App* app) {
  WeakSupConfig cfg;
  if (!a.config.empty()) cfg = weaksup_config_from_json(read_json(a.config));
  const bool override_model = app->count("--model") || app->count("--raster") || app->count("--micro") ||
                              app->count("--model-config") || a.config.empty();
  if (override_model) cfg.model = a.model.build(a.seed);
  if (a.seed) {
    cfg.model.seed = *a.seed;
    cfg.train.seed = *a.seed;
    cfg.hough.seed = *a.seed;
  }
  if (a.epochs) cfg.train.max_epochs = *a.epochs;
  cfg.raster_width = cfg.model.input_width;
  cfg.raster_height = cfg.model.input_height;
  if (!a.held_out.empty()) cfg.held_out_location = a.held_out;
  cfg.validate();

  std::vector<std::string> ids;
  if (!a.seeds.empty()) {
    std::stringstream ss(a.seeds);
    for (std::string id; std::getline(ss, id, ',');) {
      if (!id.empty()) ids.push_back(id);
    }
  } else if (a.seed_count > 0) {
    const DatasetManifest manifest = load_manifest(a.manifest);
    std::vector<std::string> candidates;
    for (const auto& e : manifest.samples) {
      const bool held = cfg.held_out_location && e.location_tag == *cfg.held_out_location;
      if (e.split == Split::kTrain && !held && e.mask && e.label_kind == LabelKind::kHuman) candidates.push_back(e.id);
    }
    Rng rng(a.seed.value_or(0));
    for (std::size_t i = candidates.size(); i > 1; --i) {
      std::swap(candidates[i - 1], candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    candidates.resize(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(a.seed_count)));
    ids = candidates;
  }
  const Orchestrator o = Orchestrator::start(a.state, a.manifest, ids, cfg, backend_for(cfg));
  write_json("-", phase_summary(o));
}

Verdict verdict_from_json(const json& v, cv::Size raster, const fs::path& base) {
  Verdict out;
  out.sample_id = v.at("sample_id").get<std::string>();
  out.decision = parse_decision(v.at("decision").get<std::string>());
  out.reviewer = v.value("reviewer", "cli");
  out.session = v.value("session", "cli");
  if (v.contains("annotation")) {
    std::vector<cv::Point2f> points;
    for (const auto& p : v["annotation"].at("polyline")) points.emplace_back(p.at(0).get<float>(), p.at(1).get<float>());
    if (points.size() < 2) throw Error(ErrorCode::kInvalidArgument, out.sample_id + ": polyline needs 2 points");
    out.corrected_mask = rasterize_polyline(points, v["annotation"].value("brush_width", 4), raster);
  } else if (v.contains("mask")) {
    fs::path path = v["mask"].get<std::string>();
    if (path.is_relative()) path = base / path;
    out.corrected_mask = read_mask(path);
  }
  return out;
}

struct IngestArgs {
  std::string state, verdicts, oracle;
  std::optional<std::uint64_t> seed;
};

void run_ingest(const IngestArgs& a) {
  if (a.verdicts.empty() == a.oracle.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "give exactly one of --verdicts or --oracle-reviewer");
  }
  Orchestrator o = open_state(a.state);
  std::vector<Verdict> verdicts;
  if (!a.oracle.empty()) {
    OracleReviewer reviewer = parse_oracle_reviewer(a.oracle);
    if (a.seed && a.oracle.find("seed=") == std::string::npos) reviewer.seed = *a.seed;
    verdicts = reviewer.review(o.emit_review_batch(), o);
  } else {
    const json doc = read_json(a.verdicts);
    const json& list = doc.is_object() ? doc.at("verdicts") : doc;
    const fs::path base = fs::path(a.verdicts).parent_path();
    try {
      for (const auto& v : list) verdicts.push_back(verdict_from_json(v, o.config().raster(), base));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, std::string("verdicts: ") + e.what());
    }
  }
  o.ingest_verdicts(verdicts);
  std::map<std::string, int> decisions;
  for (const auto& v : verdicts) ++decisions[to_string(v.decision)];
  write_json("-", {{"phase", o.state().phase_index}, {"ingested", verdicts.size()}, {"decisions", decisions},
                   {"pools", to_json(o.state().counts())}});
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string state, host, config;
  int port = -1;
};

ReviewService* g_service = nullptr;

void handle_signal(int) {
  if (g_service) g_service->stop();
}

void run_serve(ServeArgs a) {
  std::string host = "127.0.0.1";
  int port = 8080;
  if (!a.config.empty()) {
    const json doc = read_json(a.config);
    host = doc.value("host", host);
    port = doc.value("port", port);
  }
  if (const char* env = std::getenv("CAVELINE_HOST")) host = env;
  if (const char* env = std::getenv("CAVELINE_PORT")) {
    try {
      port = std::stoi(env);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, std::string("CAVELINE_PORT='") + env + "'");
    }
  }
  if (!a.host.empty()) host = a.host;
  if (a.port >= 0) port = a.port;
  if (port < 0 || port > 65535) throw Error(ErrorCode::kInvalidArgument, "port out of range");

  const json doc = read_json(fs::path(a.state) / "state.json");
  ReviewService service(a.state, backend_for(weaksup_config_from_json(doc.at("config"))));
  const int bound = service.bind(host, port);
  g_service = &service;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << json{{"listening", host + ":" + std::to_string(bound)}, {"port", bound}}.dump() << std::endl;
  service.serve();
  g_service = nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caveline: segmentation, weak supervision and review tooling"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "seed for every random choice")->type_name("INT");
  app.fallthrough();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--spec", synth.spec, "SyntheticSpec JSON, or {\"locations\": [...]}")->required();
  synth_cmd->add_option("--out", synth.out, "output directory")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train one supervised phase");
  train_cmd->add_option("--manifest", train_args.manifest)->required();
  train_cmd->add_option("--config", train_args.config, "TrainConfig JSON");
  train_cmd->add_option("--out", train_args.out, "run directory")->required();
  train_cmd->add_option("--epochs", train_args.epochs);
  train_args.model.add(train_cmd);

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "predict masks for a directory of images");
  predict_cmd->add_option("--ckpt", predict.ckpt)->required();
  predict_cmd->add_option("--images", predict.images)->required();
  predict_cmd->add_option("--out", predict.out)->required();
  predict_cmd->add_option("--threshold", predict.threshold);
  predict_cmd->add_option("--hough-config", predict.hough_config, "HoughConfig JSON");
  predict_cmd->add_flag("--postprocess", predict.postprocess, "also write line JSON and overlays");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "score predicted masks against a manifest");
  eval_cmd->add_option("--pred", eval.pred)->required();
  eval_cmd->add_option("--truth", eval.truth, "manifest")->required();
  eval_cmd->add_option("--report", eval.report);
  eval_cmd->add_option("--split", eval.split)->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval_cmd->add_option("--location", eval.location);

  auto* ws = app.add_subcommand("weaksup", "weak-supervision loop");
  ws->require_subcommand(1);
  InitArgs init;
  auto* init_cmd = ws->add_subcommand("init", "seed phase 1 and train the first model");
  init_cmd->add_option("--state", init.state)->required();
  init_cmd->add_option("--manifest", init.manifest)->required();
  init_cmd->add_option("--config", init.config, "WeakSupConfig JSON");
  init_cmd->add_option("--seeds", init.seeds, "comma-separated seed ids");
  init_cmd->add_option("--seed-count", init.seed_count, "number of random seed ids");
  init_cmd->add_option("--held-out", init.held_out, "location held out for testing");
  init_cmd->add_option("--epochs", init.epochs);
  init.model.add(init_cmd);

  std::string state, out;
  auto* review_cmd = ws->add_subcommand("review-export", "predictions for every pending sample");
  review_cmd->add_option("--state", state)->required();
  review_cmd->add_option("--out", out, "output JSON (stdout by default)");

  IngestArgs ingest;
  auto* ingest_cmd = ws->add_subcommand("ingest", "apply reviewer verdicts");
  ingest_cmd->add_option("--state", ingest.state)->required();
  ingest_cmd->add_option("--verdicts", ingest.verdicts, "verdict list JSON");
  ingest_cmd->add_option("--oracle-reviewer", ingest.oracle, "simulated reviewer, e.g. tau=0.7");

  auto* advance_cmd = ws->add_subcommand("advance", "retrain on the grown pools");
  advance_cmd->add_option("--state", state)->required();

  auto* status_cmd = ws->add_subcommand("status", "phase summaries");
  status_cmd->add_option("--state", state)->required();

  int phase = 0;
  auto* export_cmd = ws->add_subcommand("export", "manifest fragment of one phase");
  export_cmd->add_option("--state", state)->required();
  export_cmd->add_option("--phase", phase)->required();
  export_cmd->add_option("--out", out);

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "run the review service");
  serve_cmd->add_option("--state", serve.state)->required();
  serve_cmd->add_option("--host", serve.host);
  serve_cmd->add_option("--port", serve.port);
  serve_cmd->add_option("--config", serve.config, "JSON with host and port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitValidation, "UsageError", e.what());
  }

  try {
    if (*synth_cmd) {
      synth.seed = seed;
      run_synth(synth);
    } else if (*train_cmd) {
      train_args.seed = seed;
      run_train(train_args);
    } else if (*predict_cmd) {
      predict.seed = seed;
      run_predict(predict);
    } else if (*eval_cmd) {
      run_eval(eval);
    } else if (*init_cmd) {
      init.seed = seed;
      run_init(init, init_cmd);
    } else if (*review_cmd) {
      Orchestrator o = open_state(state);
      json items = json::array();
      for (const auto& item : o.emit_review_batch()) items.push_back(to_json(item));
      write_json(out, {{"phase", o.state().phase_index}, {"state", o.dir().string()}, {"items", items}});
    } else if (*ingest_cmd) {
      ingest.seed = seed;
      run_ingest(ingest);
    } else if (*advance_cmd) {
      Orchestrator o = open_state(state);
      o.advance_phase();
      write_json("-", phase_summary(o));
    } else if (*status_cmd) {
      write_json("-", phase_summary(open_state(state)));
    } else if (*export_cmd) {
      write_json(out, open_state(state).export_phase(phase));
    } else if (*serve_cmd) {
      run_serve(serve);
    }
  } catch (const Error& e) {
    return fail(exit_code_for(e.code()), std::string(to_string(e.code())), e.what());
  } catch (const std::exception& e) {
    return fail(kExitRuntime, "RuntimeError", e.what());
  }
  return 0;
}
