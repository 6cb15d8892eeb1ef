#include "test_prelude.hpp"

#include <fstream>
#include <future>
#include <thread>

#include "caveline/error.hpp"
#include "caveline/service.hpp"
#include "httplib.h"
#include "test_support.hpp"
#include "weaksup_support.hpp"

using namespace caveline;
using caveline::testing::OracleBackend;
using caveline::testing::TempDir;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Served {
  std::unique_ptr<ReviewService> service;
  int port = 0;
  std::thread thread;

  Served(const fs::path& dir, std::shared_ptr<PhaseBackend> backend)
      : service(std::make_unique<ReviewService>(dir, std::move(backend))) {
    port = service->bind("127.0.0.1", 0);
    thread = std::thread([this] { service->serve(); });
  }
  ~Served() {
    service->stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    return c;
  }
};

struct Fixture {
  TempDir tmp{"service"};
  DatasetManifest manifest;
  std::shared_ptr<OracleBackend> backend;
  WeakSupConfig config = caveline::testing::small_config();
  fs::path state;

  explicit Fixture(int count = 24, int seeds = 4) {
    manifest = caveline::testing::small_dataset(tmp / "data", count, 0.0, 0.0);
    backend = std::make_shared<OracleBackend>(manifest, config.raster());
    state = tmp / "state";
    Orchestrator::start(state, tmp / "data" / "manifest.json", caveline::testing::first_train_ids(manifest, seeds),
                        config, backend);
  }
};

struct Reply {
  int status = 0;
  json body;
};

Reply get(const httplib::Client& c, const std::string& path) {
  auto res = const_cast<httplib::Client&>(c).Get(path);
  REQUIRE(res);
  return {res->status, res->get_header_value("Content-Type") == "application/json" ? json::parse(res->body) : json()};
}

Reply post(const httplib::Client& c, const std::string& path, const std::string& body,
           const std::string& session = "s1") {
  httplib::Headers headers{{"X-Session", session}, {"X-Reviewer", "rev"}};
  auto res = const_cast<httplib::Client&>(c).Post(path, headers, body, "application/json");
  REQUIRE(res);
  return {res->status, json::parse(res->body)};
}

json accepts(const std::vector<std::string>& ids) {
  json list = json::array();
  for (const auto& id : ids) list.push_back({{"sample_id", id}, {"decision", "ACCEPT"}});
  return list;
}

std::vector<std::string> pending_ids(const httplib::Client& c, int phase = 1) {
  const auto r = get(c, "/phases/" + std::to_string(phase) + "/pending?limit=1000");
  REQUIRE(r.status == 200);
  std::vector<std::string> ids;
  for (const auto& item : r.body["items"]) ids.push_back(item["sample_id"]);
  return ids;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("fresh state reports one phase with the train pool pending") {
  Fixture f(24, 4);
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto r = get(c, "/phases");
  CHECK(r.status == 200);
  CHECK(r.body["current"] == 1);
  CHECK(r.body["advancing"] == false);
  CHECK(r.body["phases"].size() == 1);
  CHECK(r.body["pools"]["pending"] == 20);
  CHECK(r.body["pools"]["labeled"] == 4);
}

TEST_CASE("pending pages and their files") {
  Fixture f(24, 4);
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto page = get(c, "/phases/1/pending?offset=5&limit=10");
  CHECK(page.status == 200);
  CHECK(page.body["total"] == 20);
  REQUIRE(page.body["items"].size() == 10);
  const auto all = pending_ids(c);
  CHECK(all.size() == 20);
  CHECK(page.body["items"][0]["sample_id"] == all[5]);
  CHECK(get(c, "/phases/1/pending?offset=30").body["items"].empty());

  const auto& item = page.body["items"][0];
  for (const char* key : {"mask_url", "overlay_url", "image_url"}) {
    auto res = c.Get(item[key].get<std::string>());
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "image/png");
    CHECK(res->body.substr(1, 3) == "PNG");
  }
  CHECK(item["dominant_line"].is_object());

  CHECK(get(c, "/phases/2/pending").status == 409);
  CHECK(get(c, "/phases/1/pending?offset=abc").status == 400);
  CHECK(get(c, "/phases/1/pending?limit=-1").status == 400);
  CHECK(get(c, "/samples/nope/image").status == 404);
  CHECK(get(c, "/jobs/job-99").status == 404);
  CHECK(get(c, "/phases/3/export").status == 404);
}

TEST_CASE("empty verdict list changes nothing") {
  Fixture f;
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto before = get(c, "/phases").body["pools"];
  const auto r = post(c, "/phases/1/verdicts", "[]");
  CHECK(r.status == 200);
  CHECK(r.body["pools"] == before);
  CHECK(get(c, "/phases").body["pools"] == before);
}

TEST_CASE("ten accepts round-trip through export") {
  Fixture f;
  Served s(f.state, f.backend);
  auto c = s.client();
  auto ids = pending_ids(c);
  ids.resize(10);
  const auto r = post(c, "/phases/1/verdicts", accepts(ids).dump());
  REQUIRE(r.status == 200);
  CHECK(r.body["pools"]["weak"] == 10);
  CHECK(r.body["pools"]["pending"] == 10);

  const auto exported = get(c, "/phases/1/export");
  REQUIRE(exported.status == 200);
  std::set<std::string> got;
  for (const auto& sample : exported.body["samples"]) {
    CHECK(sample["label_kind"] == "WEAK_POSITIVE");
    got.insert(sample["id"]);
  }
  CHECK(got == std::set<std::string>(ids.begin(), ids.end()));
}

TEST_CASE("verdict validation status codes and replay") {
  Fixture f;
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto ids = pending_ids(c);

  const auto first = post(c, "/phases/1/verdicts", accepts({ids[0]}).dump(), "alice");
  REQUIRE(first.status == 200);
  // the same session replaying gets the original answer even after other changes
  REQUIRE(post(c, "/phases/1/verdicts", accepts({ids[1]}).dump(), "alice").status == 200);
  const auto replay = post(c, "/phases/1/verdicts", accepts({ids[0]}).dump(), "alice");
  CHECK(replay.status == 200);
  CHECK(replay.body == first.body);
  // another session loses
  const auto other = post(c, "/phases/1/verdicts", accepts({ids[0]}).dump(), "bob");
  CHECK(other.status == 409);
  CHECK(other.body["error"] == "DuplicateVerdict");

  CHECK(post(c, "/phases/1/verdicts", accepts({"ghost"}).dump()).status == 404);
  const std::string labeled = f.manifest.samples[0].id;
  CHECK(post(c, "/phases/1/verdicts", accepts({labeled}).dump()).status == 404);
  CHECK(post(c, "/phases/1/verdicts", "{not json").status == 400);
  CHECK(post(c, "/phases/1/verdicts", R"({"verdicts": 3})").status == 400);
  CHECK(post(c, "/phases/1/verdicts", R"([{"sample_id": 1, "decision": "ACCEPT"}])").status == 400);
  CHECK(post(c, "/phases/1/verdicts", json::array({{{"sample_id", ids[2]}, {"decision", "MAYBE"}}}).dump()).status ==
        400);
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[2], ids[2]}).dump()).status == 400);
  const json no_polyline = json::array({{{"sample_id", ids[2]}, {"decision", "REJECT_WITH_ANNOTATION"}}});
  CHECK(post(c, "/phases/1/verdicts", no_polyline.dump()).status == 400);
  CHECK(post(c, "/phases/2/verdicts", accepts({ids[2]}).dump()).status == 409);
  CHECK(post(c, "/phases/0/verdicts", accepts({ids[2]}).dump()).status == 409);

  // a failed batch applies nothing
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[3], "ghost"}).dump()).status == 404);
  CHECK(get(c, "/phases").body["pools"]["weak"] == 2);

  // body fields override headers
  const json body = {{"session", "carol"}, {"reviewer", "Carol"}, {"verdicts", accepts({ids[4]})}};
  CHECK(post(c, "/phases/1/verdicts", body.dump(), "alice").status == 200);
  const auto reopened = Orchestrator::open(f.state, f.backend);
  CHECK(reopened.state().verdict_log.back().session == "carol");
  CHECK(reopened.state().verdict_log.back().reviewer == "Carol");
}

TEST_CASE("annotated polylines are stored as their rasterization") {
  Fixture f;
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto ids = pending_ids(c);
  const json verdicts = json::array({{{"sample_id", ids[0]},
                                      {"decision", "REJECT_WITH_ANNOTATION"},
                                      {"annotation", {{"polyline", {{3, 5}, {27, 20}}}, {"brush_width", 4}}}}});
  REQUIRE(post(c, "/phases/1/verdicts", verdicts.dump()).status == 200);

  const auto exported = get(c, "/phases/1/export").body;
  REQUIRE(exported["samples"].size() == 1);
  CHECK(exported["samples"][0]["label_kind"] == "NEGATIVE_RELABELED");
  const cv::Mat stored = read_mask(f.state / exported["samples"][0]["mask"].get<std::string>());
  CHECK(cv::countNonZero(stored != rasterize_polyline({{3, 5}, {27, 20}}, 4, f.config.raster())) == 0);

  // geometric oracle: a brush of width 4 covers the segment's 1 px core and
  // nothing farther than 3 px from it
  const cv::Point2f a(3, 5), b(27, 20);
  const cv::Point2f d = b - a;
  const float len2 = d.dot(d);
  for (int y = 0; y < stored.rows; ++y) {
    for (int x = 0; x < stored.cols; ++x) {
      const cv::Point2f p(static_cast<float>(x), static_cast<float>(y));
      const float t = std::clamp((p - a).dot(d) / len2, 0.0f, 1.0f);
      const float dist = static_cast<float>(cv::norm(p - (a + t * d)));
      if (dist <= 1.0f) CHECK(stored.at<std::uint8_t>(y, x) == 1);
      if (dist > 3.0f) CHECK(stored.at<std::uint8_t>(y, x) == 0);
    }
  }

  const json short_line = json::array({{{"sample_id", ids[1]},
                                        {"decision", "REJECT_WITH_ANNOTATION"},
                                        {"annotation", {{"polyline", {{3, 5}}}, {"brush_width", 4}}}}});
  CHECK(post(c, "/phases/1/verdicts", short_line.dump()).status == 400);
}

TEST_CASE("advance runs as a job and locks verdicts meanwhile") {
  Fixture f;
  std::promise<void> release;
  std::shared_future<void> gate = release.get_future().share();
  std::atomic<bool> entered{false};
  f.backend->train_hook = [&] {
    entered = true;
    gate.wait();
  };
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto ids = pending_ids(c);

  CHECK(post(c, "/phases/1/advance", "").status == 409);  // nothing new yet
  REQUIRE(post(c, "/phases/1/verdicts", accepts({ids[0], ids[1]}).dump()).status == 200);
  const auto job = post(c, "/phases/1/advance", "");
  REQUIRE(job.status == 202);
  const std::string job_id = job.body["job_id"];
  while (!entered) std::this_thread::sleep_for(std::chrono::milliseconds(5));

  CHECK(get(c, "/phases").body["advancing"] == true);
  CHECK(get(c, "/jobs/" + job_id).body["status"] == "running");
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[2]}).dump()).status == 423);
  CHECK(post(c, "/phases/1/advance", "").status == 423);
  CHECK(get(c, "/phases/1/pending?limit=3").status == 200);

  release.set_value();
  s.service->wait_for_jobs();
  const auto done = get(c, "/jobs/" + job_id);
  CHECK(done.body["status"] == "succeeded");
  CHECK(done.body["phase"] == 2);
  const auto phases = get(c, "/phases").body;
  CHECK(phases["current"] == 2);
  CHECK(phases["phases"].size() == 2);
  CHECK(phases["phases"][1]["pools"]["weak"] == 2);

  // verdicts against the finished phase are stale
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[2]}).dump()).status == 409);
  CHECK(post(c, "/phases/2/verdicts", accepts({ids[2]}).dump()).status == 200);
  CHECK(get(c, "/phases/1/export").body["samples"].size() == 2);
  CHECK(get(c, "/phases/2/export").body["samples"].size() == 1);
}

TEST_CASE("restart recovers acknowledged verdicts from the log") {
  Fixture f;
  const std::string stale = slurp(f.state / "state.json");
  std::vector<std::string> ids;
  {
    Served s(f.state, f.backend);
    auto c = s.client();
    ids = pending_ids(c);
    REQUIRE(post(c, "/phases/1/verdicts", accepts({ids[0], ids[1], ids[2]}).dump()).status == 200);
  }
  // simulate a crash after the log append but before the snapshot rewrite
  std::ofstream(f.state / "state.json", std::ios::trunc) << stale;
  Served s(f.state, f.backend);
  auto c = s.client();
  const auto r = get(c, "/phases");
  CHECK(r.body["pools"]["weak"] == 3);
  CHECK(r.body["pools"]["pending"] == 17);
  // the same session replaying after restart is still idempotent
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[0]}).dump()).status == 200);
  CHECK(post(c, "/phases/1/verdicts", accepts({ids[0]}).dump(), "other").status == 409);
  CHECK(get(c, "/phases").body["pools"]["weak"] == 3);
}

TEST_CASE("concurrent sessions: distinct samples both win, same sample first wins") {
  Fixture f(40, 4);
  Served s(f.state, f.backend);
  const auto ids = pending_ids(s.client());
  for (int round = 0; round < 5; ++round) {
    const std::string a = ids[4 * round], b = ids[4 * round + 1], shared = ids[4 * round + 2];
    auto send = [&](const std::string& id, const std::string& session) {
      return post(s.client(), "/phases/1/verdicts", accepts({id}).dump(), session).status;
    };
    auto ra = std::async(std::launch::async, send, a, "A" + std::to_string(round));
    auto rb = std::async(std::launch::async, send, b, "B" + std::to_string(round));
    CHECK(ra.get() == 200);
    CHECK(rb.get() == 200);
    auto sa = std::async(std::launch::async, send, shared, "A" + std::to_string(round));
    auto sb = std::async(std::launch::async, send, shared, "B" + std::to_string(round));
    std::multiset<int> codes{sa.get(), sb.get()};
    CHECK(codes == std::multiset<int>{200, 409});
  }
  CHECK(get(s.client(), "/phases").body["pools"]["weak"] == 15);
}
