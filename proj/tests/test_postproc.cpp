#include "test_prelude.hpp"

#include <random>

#include <opencv2/imgproc.hpp>

#include "caveline/error.hpp"
#include "caveline/postproc.hpp"
#include "test_support.hpp"

using namespace caveline;
using caveline::testing::line_mask;

namespace {

double dist(cv::Point2f a, cv::Point2f b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Worst endpoint distance under the better of the two endpoint pairings.
double endpoint_error(const LineSegment& s, cv::Point2f a, cv::Point2f b) {
  return std::min(std::max(dist(s.p0, a), dist(s.p1, b)), std::max(dist(s.p0, b), dist(s.p1, a)));
}

double angle_gap(double a, double b) {
  const double d = std::fmod(std::abs(a - b), CV_PI);
  return std::min(d, CV_PI - d);
}

LineSegment seg(float x0, float y0, float x1, float y1, int votes) { return {{x0, y0}, {x1, y1}, votes}; }

void add_salt(cv::Mat& mask, double fraction, std::mt19937& gen) {
  std::bernoulli_distribution coin(fraction);
  for (int y = 0; y < mask.rows; ++y) {
    for (int x = 0; x < mask.cols; ++x) {
      if (coin(gen)) mask.at<std::uint8_t>(y, x) = 1;
    }
  }
}

cv::Point random_border_point(cv::Size size, int margin, std::mt19937& gen) {
  std::uniform_int_distribution<int> ux(margin, size.width - 1 - margin), uy(margin, size.height - 1 - margin);
  return {ux(gen), uy(gen)};
}

}  // namespace

TEST_CASE("hough on trivial masks") {
  const HoughConfig cfg;
  CHECK(hough_segments(cv::Mat::zeros(200, 300, CV_8UC1), cfg).empty());
  CHECK_FALSE(dominant_line(cv::Mat::zeros(200, 300, CV_8UC1), cfg).has_value());

  // fewer foreground pixels than the vote threshold
  const cv::Mat tiny = line_mask({300, 200}, {10, 10}, {30, 10}, 1);
  CHECK_FALSE(dominant_line(tiny, cfg).has_value());
}

TEST_CASE("hough recovers a horizontal line") {
  HoughConfig cfg;
  const cv::Mat mask = line_mask({320, 200}, {50, 100}, {249, 100}, 1);
  const auto segments = hough_segments(mask, cfg);
  REQUIRE(segments.size() == 1);
  const auto& s = segments[0];
  CHECK(angle_gap(s.direction(), 0.0) <= cfg.theta_res);
  CHECK(endpoint_error(s, {50, 100}, {249, 100}) <= 3.0);
  CHECK(s.votes >= cfg.vote_threshold);
  CHECK(s.length() >= cfg.min_line_length);
}

TEST_CASE("hough recovers two perpendicular lines") {
  HoughConfig cfg;
  cv::Mat mask = line_mask({300, 300}, {20, 60}, {169, 60}, 1);
  cv::line(mask, {220, 100}, {220, 249}, cv::Scalar(1), 1, cv::LINE_8);
  const auto segments = hough_segments(mask, cfg);
  REQUIRE(segments.size() == 2);
  int horizontal = 0, vertical = 0;
  for (const auto& s : segments) {
    if (angle_gap(s.direction(), 0.0) <= cfg.theta_res && endpoint_error(s, {20, 60}, {169, 60}) <= 3.0) ++horizontal;
    if (angle_gap(s.direction(), CV_PI / 2) <= cfg.theta_res && endpoint_error(s, {220, 100}, {220, 249}) <= 3.0) {
      ++vertical;
    }
  }
  CHECK(horizontal == 1);
  CHECK(vertical == 1);
}

TEST_CASE("hough bridges gaps up to the configured limit") {
  HoughConfig cfg;
  cv::Mat mask = line_mask({300, 100}, {20, 50}, {119, 50}, 1);
  cv::line(mask, {126, 50}, {249, 50}, cv::Scalar(1), 1, cv::LINE_8);
  auto segments = hough_segments(mask, cfg);
  REQUIRE(segments.size() == 1);
  CHECK(endpoint_error(segments[0], {20, 50}, {249, 50}) <= 3.0);

  cfg.max_line_gap = 3;
  segments = hough_segments(mask, cfg);
  CHECK(segments.size() == 2);
}

TEST_CASE("segment geometry") {
  const auto s = seg(0, 10, 10, 10, 1);
  CHECK(s.length() == doctest::Approx(10.0));
  CHECK(s.direction() == doctest::Approx(0.0));
  CHECK(s.rho() == doctest::Approx(10.0));
  CHECK(s.distance_to_carrier({5, 13}) == doctest::Approx(3.0));
  CHECK(seg(0, 0, -1, 1, 1).direction() == doctest::Approx(3 * CV_PI / 4));
}

TEST_CASE("merge examples") {
  HoughConfig cfg;
  CHECK(merge_segments({}, cfg).empty());

  const auto merged = merge_segments({seg(0, 0, 50, 0, 60), seg(50, 0, 100, 0, 40)}, cfg);
  REQUIRE(merged.size() == 1);
  CHECK(endpoint_error(merged[0], {0, 0}, {100, 0}) <= 1e-4);
  CHECK(merged[0].votes == 100);

  cfg.merge_angle = 10.0 * CV_PI / 180.0;
  const std::vector<LineSegment> crossing = {seg(0, 0, 100, 0, 50), seg(0, 0, 70, 70, 50)};
  const auto kept = merge_segments(crossing, cfg);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].votes == 50);
  CHECK(endpoint_error(kept[1], {0, 0}, {70, 70}) == 0.0);

  // parallel carriers further apart than merge_distance stay separate
  CHECK(merge_segments({seg(0, 0, 100, 0, 5), seg(0, 20, 100, 20, 5)}, cfg).size() == 2);
}

TEST_CASE("merge properties on random segment sets") {
  std::mt19937 gen(21);
  std::uniform_real_distribution<float> coord(0, 200), jitter(-3, 3);
  std::uniform_int_distribution<int> votes(1, 100);
  HoughConfig cfg;
  cfg.iterations = 50;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<LineSegment> segments;
    const int n = std::uniform_int_distribution<int>(0, 8)(gen);
    // clusters of nearly collinear pieces so that merges actually happen
    const float y = coord(gen);
    for (int i = 0; i < n; ++i) {
      if (i % 2 == 0) {
        const float x = coord(gen);
        segments.push_back(seg(x, y + jitter(gen) * 0.3f, x + 30 + coord(gen) / 4, y + jitter(gen) * 0.3f, votes(gen)));
      } else {
        segments.push_back(seg(coord(gen), coord(gen), coord(gen) + 1, coord(gen) + 1, votes(gen)));
      }
    }
    long long input_votes = 0;
    for (const auto& s : segments) input_votes += s.votes;

    const auto once = merge_segments(segments, cfg);
    long long output_votes = 0;
    for (const auto& s : once) output_votes += s.votes;
    CHECK(output_votes <= input_votes);
    CHECK(once.size() <= segments.size());

    if (!has_mergeable_pair(once, cfg)) {
      const auto twice = merge_segments(once, cfg);
      REQUIRE(twice.size() == once.size());
      for (size_t i = 0; i < once.size(); ++i) {
        CHECK(twice[i].p0 == once[i].p0);
        CHECK(twice[i].p1 == once[i].p1);
        CHECK(twice[i].votes == once[i].votes);
      }
    }
  }
}

TEST_CASE("strongest segment tie breaks") {
  CHECK_FALSE(strongest_segment({}).has_value());
  CHECK(strongest_segment({seg(0, 0, 10, 0, 5), seg(0, 0, 5, 0, 9)})->votes == 9);
  CHECK(strongest_segment({seg(0, 0, 10, 0, 5), seg(0, 5, 30, 5, 5)})->length() == doctest::Approx(30));
  // equal votes and length: smaller rho
  CHECK(strongest_segment({seg(0, 8, 10, 8, 5), seg(0, 3, 10, 3, 5)})->p0.y == 3.0f);
}

TEST_CASE("hough is deterministic and monotone in the vote threshold") {
  std::mt19937 gen(8);
  for (int trial = 0; trial < 12; ++trial) {
    cv::Mat mask = cv::Mat::zeros(160, 240, CV_8UC1);
    for (int k = 0; k < 3; ++k) {
      cv::line(mask, random_border_point(mask.size(), 5, gen), random_border_point(mask.size(), 5, gen),
               cv::Scalar(1), 1 + static_cast<int>(gen() % 3), cv::LINE_8);
    }
    add_salt(mask, 0.01, gen);
    HoughConfig cfg;
    cfg.seed = trial;
    const auto a = hough_segments(mask, cfg);
    const auto b = hough_segments(mask, cfg);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].p0 == b[i].p0);
      CHECK(a[i].p1 == b[i].p1);
      CHECK(a[i].votes == b[i].votes);
    }
    size_t previous = a.size();
    for (int threshold : {40, 60, 90, 140}) {
      cfg.vote_threshold = threshold;
      const size_t count = hough_segments(mask, cfg).size();
      CHECK(count <= previous);
      previous = count;
    }
  }
}

TEST_CASE("dominant line on clean straight cavelines") {
  std::mt19937 gen(3);
  const cv::Size size(320, 240);
  for (int trial = 0; trial < 20; ++trial) {
    cv::Point a, b;
    do {
      a = random_border_point(size, 10, gen);
      b = random_border_point(size, 10, gen);
    } while (std::hypot(a.x - b.x, a.y - b.y) < 120);
    const cv::Mat mask = line_mask(size, a, b, 4);
    const auto line = dominant_line(mask, HoughConfig{});
    REQUIRE(line.has_value());
    CHECK(endpoint_error(*line, a, b) <= 5.0);
  }
}

TEST_CASE("dominant line survives salt noise and a distractor stroke") {
  std::mt19937 gen(4);
  const cv::Size size(320, 240);
  int hits = 0;
  const int trials = 10;
  for (int trial = 0; trial < trials; ++trial) {
    cv::Point a, b;
    do {
      a = random_border_point(size, 10, gen);
      b = random_border_point(size, 10, gen);
    } while (std::hypot(a.x - b.x, a.y - b.y) < 160);
    cv::Mat mask = line_mask(size, a, b, 4);
    const cv::Point c = random_border_point(size, 30, gen);
    cv::line(mask, c, c + cv::Point(25, 10), cv::Scalar(1), 4, cv::LINE_8);
    add_salt(mask, 0.30, gen);
    const auto line = dominant_line(mask, HoughConfig{});
    if (line && endpoint_error(*line, a, b) <= 8.0) ++hits;
  }
  CHECK(hits >= trials - 1);
}

TEST_CASE("clean_mask only engages on dense masks") {
  const cv::Mat sparse = line_mask({100, 100}, {10, 10}, {90, 90}, 2);
  CHECK(cv::countNonZero(clean_mask(sparse, HoughConfig{}) != sparse) == 0);

  std::mt19937 gen(1);
  cv::Mat noisy = line_mask({200, 200}, {10, 100}, {190, 100}, 5);
  add_salt(noisy, 0.3, gen);
  const cv::Mat cleaned = clean_mask(noisy, HoughConfig{});
  CHECK(cv::countNonZero(cleaned) < cv::countNonZero(noisy) / 3);
  CHECK(cleaned.at<std::uint8_t>(100, 100) == 1);
}

TEST_CASE("rotating the mask rotates the dominant line") {
  std::mt19937 gen(6);
  const cv::Size size(300, 200);
  for (int trial = 0; trial < 10; ++trial) {
    cv::Point a, b;
    do {
      a = random_border_point(size, 10, gen);
      b = random_border_point(size, 10, gen);
    } while (std::hypot(a.x - b.x, a.y - b.y) < 100);
    const cv::Mat mask = line_mask(size, a, b, 3);
    cv::Mat rotated;
    cv::rotate(mask, rotated, cv::ROTATE_90_CLOCKWISE);  // (x, y) -> (H-1-y, x)
    const auto original = dominant_line(mask, HoughConfig{});
    const auto turned = dominant_line(rotated, HoughConfig{});
    REQUIRE(original.has_value());
    REQUIRE(turned.has_value());
    auto rot = [&](cv::Point2f p) { return cv::Point2f(static_cast<float>(size.height - 1) - p.y, p.x); };
    CHECK(endpoint_error(*turned, rot(original->p0), rot(original->p1)) <= 2.0);
    CHECK(angle_gap(turned->direction(), original->direction() + CV_PI / 2) <= HoughConfig{}.theta_res + 1e-9);
  }
}

TEST_CASE("polyline chaining follows a bent caveline") {
  cv::Mat mask = line_mask({400, 300}, {20, 150}, {180, 150}, 3);
  cv::line(mask, {180, 150}, {340, 80}, cv::Scalar(1), 3, cv::LINE_8);
  const auto result = extract_lines(mask, HoughConfig{});
  REQUIRE(result.dominant.has_value());
  REQUIRE(result.polyline.size() >= 3);
  const auto& front = result.polyline.front();
  const auto& back = result.polyline.back();
  const double span = std::min(std::max(dist(front, {20, 150}), dist(back, {340, 80})),
                               std::max(dist(front, {340, 80}), dist(back, {20, 150})));
  CHECK(span <= 8.0);

  const auto doc = to_json(result);
  CHECK(doc.contains("segments"));
  CHECK(doc.contains("dominant"));
  const auto back_seg = line_segment_from_json(to_json(*result.dominant));
  CHECK(back_seg.p0 == result.dominant->p0);
  CHECK(back_seg.votes == result.dominant->votes);
}

TEST_CASE("config validation and overlay") {
  HoughConfig cfg;
  cfg.merge_angle = CV_PI / 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = HoughConfig{};
  cfg.rho_res = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(to_json(hough_config_from_json(to_json(HoughConfig{}))) == to_json(HoughConfig{}));

  cv::Mat rgb(50, 80, CV_32FC3, cv::Scalar(0.5, 0.5, 0.5));
  const cv::Mat mask = line_mask({80, 50}, {5, 25}, {75, 25}, 2);
  const cv::Mat overlay = render_overlay(rgb, mask, seg(5, 25, 75, 25, 10));
  CHECK(overlay.type() == CV_8UC3);
  CHECK(overlay.size() == rgb.size());
}
