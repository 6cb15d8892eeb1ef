#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"

namespace caveline {

// Pixel confusion counts over the caveline (foreground) class.
struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const;
  double recall() const;
  /// Overlap over union; 1.0 when both masks are empty.
  double iou() const;
  /// 2PR/(P+R); 0 when P+R = 0.
  double f1() const;
};

/// Both masks must be CV_8UC1 with values in {0,1} and equal size.
Confusion confusion(const cv::Mat& pred_bin, const cv::Mat& target);

double iou(const cv::Mat& pred_bin, const cv::Mat& target);
double f1(const cv::Mat& pred_bin, const cv::Mat& target);

struct SampleScore {
  std::string id;
  double iou = 0.0, f1 = 0.0, precision = 0.0, recall = 0.0;
};

/// Dataset-level scores are means of per-sample scores, stored in [0,1].
/// JSON output scales the headline numbers by 100.
struct EvalReport {
  double iou = 0.0, f1 = 0.0, precision = 0.0, recall = 0.0;
  std::vector<SampleScore> per_sample;
  std::vector<std::string> train_sets;
  std::string test_set;
  int phase = 0;

  static EvalReport from_scores(std::vector<SampleScore> scores);
};

SampleScore score_sample(const std::string& id, const cv::Mat& pred_bin, const cv::Mat& target);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& doc);

}  // namespace caveline
