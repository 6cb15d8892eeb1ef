#include "caveline/service.hpp"

#include <condition_variable>
#include <fstream>
#include <mutex>
#include <thread>

#include "caveline/error.hpp"
#include "httplib.h"

namespace caveline {

using json = nlohmann::json;

namespace {

// Serializes backend access between request handlers and the advance job.
class LockedBackend : public PhaseBackend {
 public:
  explicit LockedBackend(std::shared_ptr<PhaseBackend> inner) : inner_(std::move(inner)) {}

  fs::path train(int phase, const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_set,
                 const std::optional<fs::path>& warm_start, const fs::path& out_dir) override {
    std::lock_guard lock(mutex_);
    return inner_->train(phase, train_set, val_set, warm_start, out_dir);
  }
  cv::Mat predict(const fs::path& checkpoint, const std::string& id, const cv::Mat& image) override {
    std::lock_guard lock(mutex_);
    return inner_->predict(checkpoint, id, image);
  }

 private:
  std::shared_ptr<PhaseBackend> inner_;
  std::mutex mutex_;
};

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownSample: return 404;
    case ErrorCode::kDuplicateVerdict:
    case ErrorCode::kNothingNew:
    case ErrorCode::kNoCheckpoint: return 409;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kShapeMismatch: return 400;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const HttpError& e) {
  send_json(res, e.status, {{"error", e.code}, {"message", e.message}});
}

int parse_int(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw HttpError{400, "BadRequest", "invalid " + what + " '" + text + "'"};
}

std::string content_type_for(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "application/octet-stream";
}

struct Job {
  std::string status = "running";
  int phase = 0;
  std::string error;
};

}  // namespace

struct ReviewService::Impl {
  fs::path dir;
  std::shared_ptr<LockedBackend> backend;
  std::mutex mutex;
  std::condition_variable idle;
  Orchestrator orch;
  httplib::Server server;
  bool advancing = false;
  std::map<std::string, Job> jobs;
  int next_job = 1;
  std::thread worker;
  std::map<std::pair<std::string, std::string>, json> replies;  // (session, sample) -> first response

  Impl(const fs::path& state_dir, std::shared_ptr<PhaseBackend> inner)
      : dir(fs::absolute(state_dir)),
        backend(std::make_shared<LockedBackend>(std::move(inner))),
        orch(Orchestrator::open(dir, backend)) {
    // overlays are rendered up front so triage never waits on the model
    orch.emit_review_batch();
    routes();
  }

  ~Impl() {
    server.stop();
    if (worker.joinable()) worker.join();
  }

  json pools_json() const { return to_json(orch.state().counts()); }

  void require_current(int k) const {
    if (k != orch.state().phase_index) {
      throw HttpError{409, "StalePhase", "phase " + std::to_string(k) + " is not current (current is " +
                                             std::to_string(orch.state().phase_index) + ")"};
    }
  }

  void require_unlocked() const {
    if (advancing) throw HttpError{423, "Locked", "phase advance in progress"};
  }

  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        std::unique_lock lock(mutex);
        fn(req, res);
      } catch (const HttpError& e) {
        send_error(res, e);
      } catch (const Error& e) {
        send_error(res, {status_for(e.code()), std::string(to_string(e.code())), e.what()});
      } catch (const json::exception& e) {
        send_error(res, {400, "BadRequest", e.what()});
      } catch (const std::exception& e) {
        send_error(res, {500, "Internal", e.what()});
      }
    };
  }

  json phases() const {
    const auto& s = orch.state();
    json history = json::array();
    for (const auto& h : s.history) {
      history.push_back({{"index", h.index}, {"checkpoint", h.checkpoint}, {"pools", to_json(h.pools)},
                         {"metrics", to_json(h.metrics)}});
    }
    return {{"current", s.phase_index}, {"advancing", advancing}, {"pools", pools_json()},
            {"checkpoint", s.checkpoint}, {"phases", history}};
  }

  json pending_page(int k, const httplib::Request& req) {
    require_current(k);
    const int offset = req.has_param("offset") ? parse_int(req.get_param_value("offset"), "offset") : 0;
    const int limit = req.has_param("limit") ? parse_int(req.get_param_value("limit"), "limit") : 50;
    if (offset < 0 || limit < 0) throw HttpError{400, "BadRequest", "offset and limit must be non-negative"};
    const auto& pending = orch.state().pending;
    json items = json::array();
    auto it = pending.begin();
    std::advance(it, std::min<std::size_t>(offset, pending.size()));
    for (int n = 0; it != pending.end() && n < limit; ++it, ++n) {
      const ReviewItem item = *orch.review_item(*it);
      items.push_back({{"sample_id", item.sample_id},
                       {"image_url", "/samples/" + item.sample_id + "/image"},
                       {"mask_url", "/files/" + item.mask},
                       {"overlay_url", "/files/" + item.overlay},
                       {"dominant_line", item.dominant_line ? to_json(*item.dominant_line) : json(nullptr)}});
    }
    return {{"phase", k}, {"total", pending.size()}, {"offset", offset}, {"limit", limit}, {"items", items}};
  }

  Verdict parse_verdict(const json& v, const std::string& reviewer, const std::string& session) const {
    if (!v.is_object() || !v.contains("sample_id") || !v["sample_id"].is_string() || !v.contains("decision") ||
        !v["decision"].is_string()) {
      throw HttpError{400, "BadRequest", "each verdict needs string sample_id and decision"};
    }
    Verdict out;
    out.sample_id = v["sample_id"].get<std::string>();
    out.reviewer = reviewer;
    out.session = session;
    try {
      out.decision = parse_decision(v["decision"].get<std::string>());
    } catch (const Error& e) {
      throw HttpError{400, "BadRequest", e.what()};
    }
    if (out.decision == Decision::kRejectWithAnnotation) {
      const json& a = v.value("annotation", json());
      if (!a.is_object() || !a.contains("polyline") || !a["polyline"].is_array() || a["polyline"].size() < 2) {
        throw HttpError{400, "BadRequest", out.sample_id + ": annotation needs a polyline of at least 2 points"};
      }
      std::vector<cv::Point2f> points;
      for (const auto& p : a["polyline"]) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw HttpError{400, "BadRequest", "polyline points must be [x, y]"};
        }
        points.emplace_back(p[0].get<float>(), p[1].get<float>());
      }
      const int brush = a.value("brush_width", 4);
      if (brush < 1) throw HttpError{400, "BadRequest", "brush_width must be positive"};
      out.corrected_mask = rasterize_polyline(points, brush, orch.config().raster());
    }
    return out;
  }

  json post_verdicts(int k, const httplib::Request& req) {
    require_unlocked();
    require_current(k);
    const json body = json::parse(req.body);
    const json* list = &body;
    if (body.is_object()) {
      if (!body.contains("verdicts")) throw HttpError{400, "BadRequest", "missing verdicts"};
      list = &body["verdicts"];
    }
    if (!list->is_array()) throw HttpError{400, "BadRequest", "verdicts must be a list"};
    std::string session = req.get_header_value("X-Session");
    std::string reviewer = req.get_header_value("X-Reviewer");
    if (body.is_object()) {
      session = body.value("session", session);
      reviewer = body.value("reviewer", reviewer);
    }
    if (session.empty()) session = "default";
    if (reviewer.empty()) reviewer = "anonymous";

    // owner session of every sample already decided this phase
    std::map<std::string, std::string> owner;
    for (const auto& r : orch.state().verdict_log) {
      if (r.phase == k) owner[r.sample_id] = r.session;
    }

    std::vector<Verdict> fresh;
    std::vector<std::string> replayed;
    std::set<std::string> seen;
    for (const auto& v : *list) {
      Verdict verdict = parse_verdict(v, reviewer, session);
      if (!seen.insert(verdict.sample_id).second) {
        throw HttpError{400, "BadRequest", verdict.sample_id + " appears twice in the batch"};
      }
      if (!orch.manifest().find(verdict.sample_id)) {
        throw HttpError{404, std::string(to_string(ErrorCode::kUnknownSample)), verdict.sample_id};
      }
      if (auto it = owner.find(verdict.sample_id); it != owner.end()) {
        if (it->second != session) {
          throw HttpError{409, std::string(to_string(ErrorCode::kDuplicateVerdict)),
                          verdict.sample_id + " was already decided by session " + it->second};
        }
        replayed.push_back(verdict.sample_id);
        continue;
      }
      fresh.push_back(std::move(verdict));
    }

    if (fresh.empty() && !replayed.empty()) {
      if (auto it = replies.find({session, replayed.front()}); it != replies.end()) return it->second;
    }
    if (!fresh.empty()) orch.ingest_verdicts(fresh);
    json applied = json::array();
    for (const auto& v : fresh) applied.push_back(v.sample_id);
    const json reply = {{"phase", k}, {"pools", pools_json()}, {"applied", applied}, {"replayed", replayed}};
    for (const auto& v : fresh) replies[{session, v.sample_id}] = reply;
    return reply;
  }

  json post_advance(int k) {
    require_unlocked();
    require_current(k);
    AdvancePlan plan = orch.plan_advance();
    if (worker.joinable()) worker.join();
    const std::string id = "job-" + std::to_string(next_job++);
    jobs[id] = Job{"running", plan.next_phase, {}};
    advancing = true;
    worker = std::thread([this, id, plan = std::move(plan)] { run_job(id, plan); });
    return {{"job_id", id}, {"status", "running"}, {"phase", k}, {"next_phase", k + 1}};
  }

  void run_job(const std::string& id, const AdvancePlan& plan) {
    std::string error;
    std::optional<AdvanceOutcome> outcome;
    try {
      // training runs without the state lock; writers are held off by `advancing`
      outcome = orch.run_advance(plan);
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard lock(mutex);
    try {
      if (outcome) {
        orch.commit_advance(*outcome);
        replies.clear();
        orch.emit_review_batch();
      }
    } catch (const std::exception& e) {
      error = e.what();
    }
    jobs[id].status = error.empty() ? "succeeded" : "failed";
    jobs[id].error = error;
    advancing = false;
    idle.notify_all();
  }

  void routes() {
    server.Get("/phases", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, phases());
    }));
    server.Get(R"(/phases/(\d+)/pending)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, pending_page(parse_int(req.matches[1], "phase"), req));
    }));
    server.Post(R"(/phases/(\d+)/verdicts)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, post_verdicts(parse_int(req.matches[1], "phase"), req));
    }));
    server.Post(R"(/phases/(\d+)/advance)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 202, post_advance(parse_int(req.matches[1], "phase")));
    }));
    server.Get(R"(/phases/(\d+)/export)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const int k = parse_int(req.matches[1], "phase");
      if (k < 1 || k > orch.state().phase_index) throw HttpError{404, "UnknownPhase", "no phase " + std::to_string(k)};
      send_json(res, 200, orch.export_phase(k));
    }));
    server.Get(R"(/jobs/([\w-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto it = jobs.find(req.matches[1]);
      if (it == jobs.end()) throw HttpError{404, "UnknownJob", req.matches[1]};
      json body = {{"job_id", it->first}, {"status", it->second.status}, {"phase", it->second.phase}};
      if (!it->second.error.empty()) body["error"] = it->second.error;
      send_json(res, 200, body);
    }));
    server.Get(R"(/samples/([^/]+)/image)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const ManifestEntry* entry = orch.manifest().find(req.matches[1]);
      if (!entry) throw HttpError{404, std::string(to_string(ErrorCode::kUnknownSample)), req.matches[1]};
      const fs::path path = orch.manifest().image_path(*entry);
      std::ifstream in(path, std::ios::binary);
      if (!in) throw HttpError{404, "MissingFile", path.string()};
      res.set_content(std::string(std::istreambuf_iterator<char>(in), {}), content_type_for(path));
    }));
    server.set_mount_point("/files/phases", (dir / "phases").string());
  }
};

ReviewService::ReviewService(const fs::path& state_dir, std::shared_ptr<PhaseBackend> backend)
    : impl_(std::make_unique<Impl>(state_dir, std::move(backend))) {}

ReviewService::~ReviewService() = default;

int ReviewService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error(ErrorCode::kIoFailure, "cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::kIoFailure, "cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void ReviewService::serve() { impl_->server.listen_after_bind(); }

void ReviewService::stop() { impl_->server.stop(); }

void ReviewService::wait_for_jobs() {
  std::unique_lock lock(impl_->mutex);
  impl_->idle.wait(lock, [this] { return !impl_->advancing; });
}

}  // namespace caveline
