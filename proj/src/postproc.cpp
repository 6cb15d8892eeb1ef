#include "caveline/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "caveline/data.hpp"
#include "caveline/error.hpp"

namespace caveline {

using nlohmann::json;

double LineSegment::length() const { return std::hypot(p1.x - p0.x, p1.y - p0.y); }

double LineSegment::direction() const {
  double a = std::atan2(p1.y - p0.y, p1.x - p0.x);
  if (a < 0) a += std::numbers::pi;
  if (a >= std::numbers::pi) a -= std::numbers::pi;
  return a;
}

double LineSegment::rho() const {
  const double theta = direction() + std::numbers::pi / 2.0;
  return std::abs(p0.x * std::cos(theta) + p0.y * std::sin(theta));
}

double LineSegment::distance_to_carrier(const cv::Point2f& p) const {
  const double dx = p1.x - p0.x, dy = p1.y - p0.y;
  const double len = std::hypot(dx, dy);
  if (len == 0.0) return std::hypot(p.x - p0.x, p.y - p0.y);
  return std::abs(dx * (p.y - p0.y) - dy * (p.x - p0.x)) / len;
}

void HoughConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, "hough: " + what); };
  if (rho_res <= 0 || theta_res <= 0) fail("resolutions must be positive");
  if (vote_threshold <= 0 || accumulator_threshold <= 0) fail("vote thresholds must be positive");
  if (min_line_length <= 0 || max_line_gap <= 0) fail("line length and gap must be positive");
  if (merge_distance <= 0 || merge_angle <= 0 || merge_angle >= std::numbers::pi / 2) {
    fail("merge_distance must be positive and merge_angle in (0, pi/2)");
  }
  if (iterations <= 0) fail("iterations must be positive");
  if (denoise_kernel != 0 && (denoise_kernel < 3 || denoise_kernel % 2 == 0)) fail("denoise_kernel must be 0 or odd >= 3");
}

json to_json(const HoughConfig& c) {
  return {{"rho_res", c.rho_res},
          {"theta_res", c.theta_res},
          {"vote_threshold", c.vote_threshold},
          {"accumulator_threshold", c.accumulator_threshold},
          {"min_line_length", c.min_line_length},
          {"max_line_gap", c.max_line_gap},
          {"merge_distance", c.merge_distance},
          {"merge_angle", c.merge_angle},
          {"iterations", c.iterations},
          {"seed", c.seed},
          {"denoise_density", c.denoise_density},
          {"denoise_kernel", c.denoise_kernel},
          {"min_component_area", c.min_component_area},
          {"link_distance", c.link_distance},
          {"link_angle", c.link_angle}};
}

HoughConfig hough_config_from_json(const json& doc) {
  HoughConfig c;
  c.rho_res = doc.value("rho_res", c.rho_res);
  c.theta_res = doc.value("theta_res", c.theta_res);
  c.vote_threshold = doc.value("vote_threshold", c.vote_threshold);
  c.accumulator_threshold = doc.value("accumulator_threshold", c.accumulator_threshold);
  c.min_line_length = doc.value("min_line_length", c.min_line_length);
  c.max_line_gap = doc.value("max_line_gap", c.max_line_gap);
  c.merge_distance = doc.value("merge_distance", c.merge_distance);
  c.merge_angle = doc.value("merge_angle", c.merge_angle);
  c.iterations = doc.value("iterations", c.iterations);
  c.seed = doc.value("seed", c.seed);
  c.denoise_density = doc.value("denoise_density", c.denoise_density);
  c.denoise_kernel = doc.value("denoise_kernel", c.denoise_kernel);
  c.min_component_area = doc.value("min_component_area", c.min_component_area);
  c.link_distance = doc.value("link_distance", c.link_distance);
  c.link_angle = doc.value("link_angle", c.link_angle);
  c.validate();
  return c;
}

namespace {

LineSegment canonical(LineSegment s) {
  if (s.p1.x < s.p0.x || (s.p1.x == s.p0.x && s.p1.y < s.p0.y)) std::swap(s.p0, s.p1);
  return s;
}

void check_mask(const cv::Mat& mask) {
  if (mask.type() != CV_8UC1) throw Error(ErrorCode::kInvalidArgument, "mask must be CV_8UC1");
}

// Foreground pixels of `mask` within `radius` of the carrier of (a, b) whose
// projection falls inside the segment (half-pixel slack at both ends).
template <typename Fn>
void for_each_corridor_pixel(const cv::Mat& mask, cv::Point2d a, cv::Point2d b, double radius, Fn&& fn) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len = std::hypot(dx, dy);
  if (len == 0.0) return;
  const double ux = dx / len, uy = dy / len;
  const int pad = static_cast<int>(std::ceil(radius)) + 1;
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x))) - pad);
  const int x1 = std::min(mask.cols - 1, static_cast<int>(std::ceil(std::max(a.x, b.x))) + pad);
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y))) - pad);
  const int y1 = std::min(mask.rows - 1, static_cast<int>(std::ceil(std::max(a.y, b.y))) + pad);
  for (int y = y0; y <= y1; ++y) {
    const auto* row = mask.ptr<std::uint8_t>(y);
    for (int x = x0; x <= x1; ++x) {
      if (!row[x]) continue;
      const double rx = x - a.x, ry = y - a.y;
      const double t = rx * ux + ry * uy;
      if (t < -0.5 || t > len + 0.5) continue;
      if (std::abs(rx * uy - ry * ux) > radius) continue;
      fn(x, y);
    }
  }
}

// Least-squares line through the mask pixels within `band` of the walked
// segment, spanning their extreme projections. Centres the segment on thick
// strokes regardless of which edge the walk followed.
std::pair<cv::Point2d, cv::Point2d> refit(const cv::Mat& mask, cv::Point2d a, cv::Point2d b, double band) {
  std::vector<cv::Point2f> pts;
  for_each_corridor_pixel(mask, a, b, band, [&](int x, int y) { pts.emplace_back(x, y); });
  if (pts.size() < 2) return {a, b};
  cv::Vec4f fit;
  cv::fitLine(pts, fit, cv::DIST_L2, 0, 0.01, 0.01);
  const double ux = fit[0], uy = fit[1], cx = fit[2], cy = fit[3];
  double lo = std::numeric_limits<double>::max(), hi = std::numeric_limits<double>::lowest();
  for (const auto& p : pts) {
    const double t = (p.x - cx) * ux + (p.y - cy) * uy;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  if (hi - lo <= 0.0) return {a, b};
  auto clamp = [&](double x, double y) {
    return cv::Point2d(std::clamp(x, 0.0, mask.cols - 1.0), std::clamp(y, 0.0, mask.rows - 1.0));
  };
  return {clamp(cx + lo * ux, cy + lo * uy), clamp(cx + hi * ux, cy + hi * uy)};
}

}  // namespace

std::vector<LineSegment> hough_segments(const cv::Mat& mask, const HoughConfig& config) {
  config.validate();
  check_mask(mask);
  std::vector<LineSegment> segments;
  const int width = mask.cols, height = mask.rows;

  std::vector<cv::Point> points;
  for (int y = 0; y < height; ++y) {
    const auto* row = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < width; ++x) {
      if (row[x]) points.emplace_back(x, y);
    }
  }
  if (points.empty()) return segments;

  const int num_angle = std::max(1, static_cast<int>(std::lround(std::numbers::pi / config.theta_res)));
  const int num_rho = static_cast<int>(std::lround(((width + height) * 2 + 1) / config.rho_res));
  const int rho_offset = (num_rho - 1) / 2;
  std::vector<double> cos_t(num_angle), sin_t(num_angle);
  for (int n = 0; n < num_angle; ++n) {
    cos_t[n] = std::cos(n * config.theta_res) / config.rho_res;
    sin_t[n] = std::sin(n * config.theta_res) / config.rho_res;
  }
  std::vector<int> accum(static_cast<std::size_t>(num_angle) * num_rho, 0);
  auto vote = [&](int x, int y, int delta) {
    for (int n = 0; n < num_angle; ++n) {
      const int r = static_cast<int>(std::lround(x * cos_t[n] + y * sin_t[n])) + rho_offset;
      accum[static_cast<std::size_t>(n) * num_rho + r] += delta;
    }
  };

  cv::Mat available = mask.clone();
  cv::Mat voted = cv::Mat::zeros(mask.size(), CV_8UC1);

  Rng rng(config.seed);
  for (std::size_t i = points.size(); i > 1; --i) {
    std::swap(points[i - 1], points[rng.next_u64() % i]);
  }

  for (const cv::Point& pt : points) {
    if (!available.at<std::uint8_t>(pt)) continue;

    int best_votes = config.accumulator_threshold - 1, best_n = -1;
    for (int n = 0; n < num_angle; ++n) {
      const int r = static_cast<int>(std::lround(pt.x * cos_t[n] + pt.y * sin_t[n])) + rho_offset;
      const int v = ++accum[static_cast<std::size_t>(n) * num_rho + r];
      if (v > best_votes) {
        best_votes = v;
        best_n = n;
      }
    }
    voted.at<std::uint8_t>(pt) = 1;
    if (best_n < 0) continue;

    // Walk along the peak line in both directions, one pixel per major-axis step.
    const double theta = best_n * config.theta_res;
    double dx = -std::sin(theta), dy = std::cos(theta);
    const double major = std::max(std::abs(dx), std::abs(dy));
    dx /= major;
    dy /= major;

    cv::Point ends[2] = {pt, pt};
    for (int k = 0; k < 2; ++k) {
      const double sx = k == 0 ? dx : -dx, sy = k == 0 ? dy : -dy;
      int gap = 0;
      for (int step = 1;; ++step) {
        const int x = static_cast<int>(std::lround(pt.x + sx * step));
        const int y = static_cast<int>(std::lround(pt.y + sy * step));
        if (x < 0 || y < 0 || x >= width || y >= height) break;
        if (available.at<std::uint8_t>(y, x)) {
          gap = 0;
          ends[k] = {x, y};
        } else if (++gap > config.max_line_gap) {
          break;
        }
      }
    }

    const cv::Point2d a(ends[1].x, ends[1].y), b(ends[0].x, ends[0].y);
    const bool good = std::hypot(b.x - a.x, b.y - a.y) >= config.min_line_length;
    if (!good) {
      // Retire the walked pixels so the same seed does not fire again.
      for (int k = 0; k < 2; ++k) {
        const double sx = k == 0 ? dx : -dx, sy = k == 0 ? dy : -dy;
        for (int step = 0;; ++step) {
          const int x = static_cast<int>(std::lround(pt.x + sx * step));
          const int y = static_cast<int>(std::lround(pt.y + sy * step));
          if (x < 0 || y < 0 || x >= width || y >= height) break;
          available.at<std::uint8_t>(y, x) = 0;
          if (x == ends[k].x && y == ends[k].y) break;
        }
      }
      continue;
    }

    for_each_corridor_pixel(available, a, b, config.rho_res, [&](int x, int y) {
      available.at<std::uint8_t>(y, x) = 0;
      if (voted.at<std::uint8_t>(y, x)) {
        vote(x, y, -1);
        voted.at<std::uint8_t>(y, x) = 0;
      }
    });

    const auto [fa, fb] = refit(mask, a, b, config.merge_distance);
    int support = 0;
    for_each_corridor_pixel(mask, fa, fb, config.rho_res, [&](int, int) { ++support; });
    if (support < config.vote_threshold) continue;
    LineSegment seg;
    seg.p0 = cv::Point2f(static_cast<float>(fa.x), static_cast<float>(fa.y));
    seg.p1 = cv::Point2f(static_cast<float>(fb.x), static_cast<float>(fb.y));
    seg.votes = support;
    segments.push_back(canonical(seg));
  }
  return segments;
}

bool can_merge(const LineSegment& a, const LineSegment& b, const HoughConfig& config) {
  double diff = std::abs(a.direction() - b.direction());
  diff = std::min(diff, std::numbers::pi - diff);
  if (diff > config.merge_angle) return false;

  const LineSegment& longer = a.length() >= b.length() ? a : b;
  const LineSegment& shorter = &longer == &a ? b : a;
  if (std::max(longer.distance_to_carrier(shorter.p0), longer.distance_to_carrier(shorter.p1)) >
      config.merge_distance) {
    return false;
  }
  const double len = longer.length();
  if (len == 0.0) return false;
  const double ux = (longer.p1.x - longer.p0.x) / len, uy = (longer.p1.y - longer.p0.y) / len;
  auto project = [&](const cv::Point2f& p) { return (p.x - longer.p0.x) * ux + (p.y - longer.p0.y) * uy; };
  const double s0 = std::min(project(shorter.p0), project(shorter.p1));
  const double s1 = std::max(project(shorter.p0), project(shorter.p1));
  const double gap = std::max({0.0, s0 - len, -s1});
  return gap <= config.max_line_gap;
}

LineSegment merge_pair(const LineSegment& a, const LineSegment& b) {
  auto weight = [](const LineSegment& s) { return s.votes > 0 ? static_cast<double>(s.votes) : s.length(); };
  const double wa = weight(a), wb = weight(b);
  auto unit = [](const LineSegment& s) {
    const double len = s.length();
    return cv::Point2d((s.p1.x - s.p0.x) / len, (s.p1.y - s.p0.y) / len);
  };
  cv::Point2d ua = unit(a), ub = unit(b);
  if (ua.dot(ub) < 0) ub = -ub;
  cv::Point2d dir = ua * wa + ub * wb;
  dir /= std::hypot(dir.x, dir.y);
  const cv::Point2d mid_a = (cv::Point2d(a.p0) + cv::Point2d(a.p1)) * 0.5;
  const cv::Point2d mid_b = (cv::Point2d(b.p0) + cv::Point2d(b.p1)) * 0.5;
  const cv::Point2d anchor = (mid_a * wa + mid_b * wb) / (wa + wb);

  double t_min = 1e300, t_max = -1e300;
  for (const cv::Point2f& p : {a.p0, a.p1, b.p0, b.p1}) {
    const double t = (cv::Point2d(p) - anchor).dot(dir);
    t_min = std::min(t_min, t);
    t_max = std::max(t_max, t);
  }
  LineSegment merged;
  const cv::Point2d p0 = anchor + dir * t_min, p1 = anchor + dir * t_max;
  merged.p0 = cv::Point2f(static_cast<float>(p0.x), static_cast<float>(p0.y));
  merged.p1 = cv::Point2f(static_cast<float>(p1.x), static_cast<float>(p1.y));
  merged.votes = a.votes + b.votes;
  return canonical(merged);
}

namespace {

bool stronger(const LineSegment& a, const LineSegment& b) {
  if (a.votes != b.votes) return a.votes > b.votes;
  if (a.length() != b.length()) return a.length() > b.length();
  return a.rho() < b.rho();
}

}  // namespace

std::vector<LineSegment> merge_segments(std::vector<LineSegment> segments, const HoughConfig& config) {
  config.validate();
  for (int round = 0; round < config.iterations; ++round) {
    std::stable_sort(segments.begin(), segments.end(), stronger);
    bool changed = false;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      for (std::size_t j = i + 1; j < segments.size();) {
        if (can_merge(segments[i], segments[j], config)) {
          segments[i] = merge_pair(segments[i], segments[j]);
          segments.erase(segments.begin() + static_cast<std::ptrdiff_t>(j));
          changed = true;
          j = i + 1;
        } else {
          ++j;
        }
      }
    }
    if (!changed) break;
  }
  std::stable_sort(segments.begin(), segments.end(), stronger);
  return segments;
}

bool has_mergeable_pair(const std::vector<LineSegment>& segments, const HoughConfig& config) {
  for (std::size_t i = 0; i < segments.size(); ++i) {
    for (std::size_t j = i + 1; j < segments.size(); ++j) {
      if (can_merge(segments[i], segments[j], config)) return true;
    }
  }
  return false;
}

std::optional<LineSegment> strongest_segment(const std::vector<LineSegment>& segments) {
  if (segments.empty()) return std::nullopt;
  return *std::min_element(segments.begin(), segments.end(), stronger);
}

cv::Mat clean_mask(const cv::Mat& mask, const HoughConfig& config) {
  check_mask(mask);
  const double density = static_cast<double>(cv::countNonZero(mask)) / static_cast<double>(mask.total());
  if (config.denoise_kernel == 0 || density <= config.denoise_density) return mask.clone();

  cv::Mat scaled = mask * 255, filtered;
  cv::medianBlur(scaled, filtered, config.denoise_kernel);
  cv::Mat labels, stats, centroids;
  const int count = cv::connectedComponentsWithStats(filtered, labels, stats, centroids, 8, CV_32S);
  cv::Mat out = cv::Mat::zeros(mask.size(), CV_8UC1);
  for (int y = 0; y < labels.rows; ++y) {
    const int* l = labels.ptr<int>(y);
    auto* o = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < labels.cols; ++x) {
      if (l[x] > 0 && l[x] < count && stats.at<int>(l[x], cv::CC_STAT_AREA) >= config.min_component_area) o[x] = 1;
    }
  }
  return out;
}

std::vector<cv::Point2f> chain_segments(const LineSegment& seed, std::vector<LineSegment> others,
                                        const HoughConfig& config) {
  std::vector<cv::Point2f> chain = {seed.p0, seed.p1};
  auto heading = [](const cv::Point2f& from, const cv::Point2f& to) { return std::atan2(to.y - from.y, to.x - from.x); };
  auto turn = [](double a, double b) {
    double d = std::abs(a - b);
    while (d > std::numbers::pi) d = std::abs(d - 2.0 * std::numbers::pi);
    return d;
  };

  for (bool grew = true; grew && !others.empty();) {
    grew = false;
    double best_dist = config.link_distance;
    std::size_t best = others.size();
    bool at_back = true, flip = false;
    for (std::size_t i = 0; i < others.size(); ++i) {
      const LineSegment& s = others[i];
      for (bool back : {true, false}) {
        const cv::Point2f end = back ? chain.back() : chain.front();
        const cv::Point2f prev = back ? chain[chain.size() - 2] : chain[1];
        const double out_heading = heading(prev, end);
        for (bool reversed : {false, true}) {
          const cv::Point2f near = reversed ? s.p1 : s.p0;
          const cv::Point2f far = reversed ? s.p0 : s.p1;
          const double d = std::hypot(near.x - end.x, near.y - end.y);
          if (d >= best_dist) continue;
          if (turn(out_heading, heading(near, far)) > config.link_angle) continue;
          best_dist = d;
          best = i;
          at_back = back;
          flip = reversed;
        }
      }
    }
    if (best == others.size()) break;
    const LineSegment s = others[best];
    const cv::Point2f near = flip ? s.p1 : s.p0;
    const cv::Point2f far = flip ? s.p0 : s.p1;
    if (at_back) {
      chain.push_back(near);
      chain.push_back(far);
    } else {
      chain.insert(chain.begin(), near);
      chain.insert(chain.begin(), far);
    }
    others.erase(others.begin() + static_cast<std::ptrdiff_t>(best));
    grew = true;
  }
  // collapse duplicate joints
  std::vector<cv::Point2f> out;
  for (const auto& p : chain) {
    if (out.empty() || std::hypot(out.back().x - p.x, out.back().y - p.y) > 1e-3) out.push_back(p);
  }
  return out;
}

LineExtraction extract_lines(const cv::Mat& mask, const HoughConfig& config) {
  config.validate();
  LineExtraction result;
  const cv::Mat cleaned = clean_mask(mask, config);
  result.segments = merge_segments(hough_segments(cleaned, config), config);
  result.dominant = strongest_segment(result.segments);
  if (result.dominant) {
    std::vector<LineSegment> rest(result.segments.begin() + 1, result.segments.end());
    result.polyline = chain_segments(*result.dominant, std::move(rest), config);
  }
  return result;
}

std::optional<LineSegment> dominant_line(const cv::Mat& mask, const HoughConfig& config) {
  return extract_lines(mask, config).dominant;
}

json to_json(const LineSegment& s) {
  return {{"p0", {s.p0.x, s.p0.y}}, {"p1", {s.p1.x, s.p1.y}}, {"votes", s.votes}};
}

LineSegment line_segment_from_json(const json& doc) {
  LineSegment s;
  s.p0 = cv::Point2f(doc.at("p0").at(0).get<float>(), doc.at("p0").at(1).get<float>());
  s.p1 = cv::Point2f(doc.at("p1").at(0).get<float>(), doc.at("p1").at(1).get<float>());
  s.votes = doc.value("votes", 0);
  return s;
}

json to_json(const LineExtraction& e) {
  json segments = json::array();
  for (const auto& s : e.segments) segments.push_back(to_json(s));
  json polyline = json::array();
  for (const auto& p : e.polyline) polyline.push_back({p.x, p.y});
  json doc = {{"segments", segments}, {"polyline", polyline}};
  doc["dominant"] = e.dominant ? json{{"p0", {e.dominant->p0.x, e.dominant->p0.y}},
                                      {"p1", {e.dominant->p1.x, e.dominant->p1.y}},
                                      {"votes", e.dominant->votes}}
                               : json(nullptr);
  return doc;
}

cv::Mat render_overlay(const cv::Mat& rgb01, const cv::Mat& mask01, const std::optional<LineSegment>& line) {
  cv::Mat rgb8;
  rgb01.convertTo(rgb8, CV_8UC3, 255.0);
  cv::Mat bgr;
  cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
  if (!mask01.empty()) {
    for (int y = 0; y < bgr.rows; ++y) {
      const auto* m = mask01.ptr<std::uint8_t>(y);
      auto* px = bgr.ptr<cv::Vec3b>(y);
      for (int x = 0; x < bgr.cols; ++x) {
        if (!m[x]) continue;
        px[x] = cv::Vec3b(static_cast<std::uint8_t>(px[x][0] / 2), static_cast<std::uint8_t>(px[x][1] / 2),
                          static_cast<std::uint8_t>(px[x][2] / 2 + 127));
      }
    }
  }
  if (line) {
    cv::line(bgr, cv::Point(cvRound(line->p0.x), cvRound(line->p0.y)),
             cv::Point(cvRound(line->p1.x), cvRound(line->p1.y)), cv::Scalar(0, 255, 0), 2, cv::LINE_AA);
  }
  return bgr;
}

}  // namespace caveline
