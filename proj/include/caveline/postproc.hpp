#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"

namespace caveline {

struct LineSegment {
  cv::Point2f p0, p1;
  int votes = 0;  // foreground pixels supporting the segment

  double length() const;
  /// Direction angle folded into [0, pi).
  double direction() const;
  /// Normal-form carrier: x cos(theta) + y sin(theta) = rho with rho >= 0.
  double rho() const;
  double distance_to_carrier(const cv::Point2f& p) const;
};

struct HoughConfig {
  double rho_res = 1.0;
  double theta_res = CV_PI / 180.0;
  int vote_threshold = 30;       // minimum corridor support of a returned segment
  int accumulator_threshold = 20;  // accumulator count that triggers a walk
  double min_line_length = 40.0;
  double max_line_gap = 10.0;
  double merge_distance = 5.0;
  double merge_angle = 5.0 * CV_PI / 180.0;
  int iterations = 3;
  std::uint64_t seed = 0;

  // Salt-noise suppression ahead of extraction; engaged only when the
  // foreground fraction exceeds `denoise_density`.
  double denoise_density = 0.05;
  int denoise_kernel = 5;
  int min_component_area = 40;

  // Polyline chaining.
  double link_distance = 40.0;
  double link_angle = 30.0 * CV_PI / 180.0;

  void validate() const;
};

nlohmann::json to_json(const HoughConfig& config);
HoughConfig hough_config_from_json(const nlohmann::json& doc);

/// Progressive probabilistic Hough transform over a {0,1} mask. Pixels are
/// visited in a seeded random order; each vote that lifts an accumulator cell
/// to `accumulator_threshold` triggers a walk along the cell's line, tolerating
/// gaps up to `max_line_gap`. Walks of at least `min_line_length` withdraw
/// their corridor pixels from the accumulator and are returned when at least
/// `vote_threshold` mask pixels lie in the corridor. Detection does not depend
/// on `vote_threshold`, so raising it only removes segments.
std::vector<LineSegment> hough_segments(const cv::Mat& mask, const HoughConfig& config);

/// True when the acute angle between `a` and `b` is within `merge_angle`, the
/// shorter segment's endpoints lie within `merge_distance` of the longer one's
/// carrier, and their extents along it are at most `max_line_gap` apart.
bool can_merge(const LineSegment& a, const LineSegment& b, const HoughConfig& config);

/// One segment spanning the extreme projections of both inputs onto their
/// vote-weighted mean carrier; votes are summed.
LineSegment merge_pair(const LineSegment& a, const LineSegment& b);

/// Repeated pairwise merging, at most `config.iterations` sweeps.
std::vector<LineSegment> merge_segments(std::vector<LineSegment> segments, const HoughConfig& config);
bool has_mergeable_pair(const std::vector<LineSegment>& segments, const HoughConfig& config);

/// The suppression step: keeps the strongest segment. Ties go to the longer
/// segment, then the smaller rho.
std::optional<LineSegment> strongest_segment(const std::vector<LineSegment>& segments);

/// Applies salt-noise suppression when the mask is dense enough to need it.
cv::Mat clean_mask(const cv::Mat& mask, const HoughConfig& config);

struct LineExtraction {
  std::vector<LineSegment> segments;  // merged candidates
  std::optional<LineSegment> dominant;
  std::vector<cv::Point2f> polyline;  // dominant segment extended by greedy endpoint linking
};

/// Full post-processing pipeline on a binary mask.
LineExtraction extract_lines(const cv::Mat& mask, const HoughConfig& config);
std::optional<LineSegment> dominant_line(const cv::Mat& mask, const HoughConfig& config);

/// Chains segments onto `seed` greedily from both ends.
std::vector<cv::Point2f> chain_segments(const LineSegment& seed, std::vector<LineSegment> others,
                                        const HoughConfig& config);

nlohmann::json to_json(const LineSegment& segment);
LineSegment line_segment_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const LineExtraction& extraction);

/// RGB [0,1] image with the mask tinted over it and the dominant line drawn;
/// returned as 8-bit BGR ready for PNG encoding.
cv::Mat render_overlay(const cv::Mat& rgb01, const cv::Mat& mask01, const std::optional<LineSegment>& line);

}  // namespace caveline
