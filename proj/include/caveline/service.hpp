#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "caveline/weaksup.hpp"

namespace caveline {

/// HTTP front end of an Orchestrator state directory.
///
///   GET  /phases                          phase summaries and current pools
///   GET  /phases/{k}/pending?offset&limit page of review items
///   POST /phases/{k}/verdicts             batch of verdicts, returns pool counts
///   POST /phases/{k}/advance              202 with a job id
///   GET  /jobs/{id}                       job status
///   GET  /phases/{k}/export               manifest fragment of phase k labels
///   GET  /samples/{id}/image              source image
///   GET  /files/phases/...                cached masks and overlays
///
/// Status codes: 400 malformed body, 404 unknown sample / phase / job,
/// 409 stale phase or a sample already decided by another session,
/// 423 while an advance is running. Reviewer and session come from the
/// `X-Reviewer` and `X-Session` headers or the body.
class ReviewService {
 public:
  ReviewService(const std::filesystem::path& state_dir, std::shared_ptr<PhaseBackend> backend);
  ~ReviewService();
  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  /// Binds to `host:port`; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void serve();
  void stop();
  /// Blocks until no advance job is running.
  void wait_for_jobs();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace caveline
