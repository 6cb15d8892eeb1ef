#include "caveline/metrics.hpp"

#include "caveline/error.hpp"

namespace caveline {

using nlohmann::json;

double Confusion::precision() const { return tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0; }
double Confusion::recall() const { return tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0; }

double Confusion::iou() const {
  const auto uni = tp + fp + fn;
  return uni > 0 ? static_cast<double>(tp) / uni : 1.0;
}

double Confusion::f1() const {
  const double p = precision(), r = recall();
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

Confusion confusion(const cv::Mat& pred_bin, const cv::Mat& target) {
  if (pred_bin.size() != target.size()) throw Error(ErrorCode::kShapeMismatch, "mask sizes differ");
  if (pred_bin.type() != CV_8UC1 || target.type() != CV_8UC1) {
    throw Error(ErrorCode::kInvalidArgument, "masks must be single-channel 8-bit");
  }
  Confusion c;
  for (int y = 0; y < pred_bin.rows; ++y) {
    const auto* p = pred_bin.ptr<std::uint8_t>(y);
    const auto* t = target.ptr<std::uint8_t>(y);
    for (int x = 0; x < pred_bin.cols; ++x) {
      if (p[x] > 1 || t[x] > 1) throw Error(ErrorCode::kInvalidArgument, "mask values must be 0 or 1");
      if (p[x]) {
        t[x] ? ++c.tp : ++c.fp;
      } else {
        t[x] ? ++c.fn : ++c.tn;
      }
    }
  }
  return c;
}

double iou(const cv::Mat& pred_bin, const cv::Mat& target) { return confusion(pred_bin, target).iou(); }
double f1(const cv::Mat& pred_bin, const cv::Mat& target) { return confusion(pred_bin, target).f1(); }

SampleScore score_sample(const std::string& id, const cv::Mat& pred_bin, const cv::Mat& target) {
  const Confusion c = confusion(pred_bin, target);
  return {id, c.iou(), c.f1(), c.precision(), c.recall()};
}

EvalReport EvalReport::from_scores(std::vector<SampleScore> scores) {
  EvalReport report;
  for (const auto& s : scores) {
    report.iou += s.iou;
    report.f1 += s.f1;
    report.precision += s.precision;
    report.recall += s.recall;
  }
  if (!scores.empty()) {
    const auto n = static_cast<double>(scores.size());
    report.iou /= n;
    report.f1 /= n;
    report.precision /= n;
    report.recall /= n;
  }
  report.per_sample = std::move(scores);
  return report;
}

json to_json(const EvalReport& r) {
  json per_sample = json::array();
  for (const auto& s : r.per_sample) {
    per_sample.push_back({{"id", s.id}, {"iou", s.iou}, {"f1", s.f1}, {"precision", s.precision}, {"recall", s.recall}});
  }
  return {{"train_sets", r.train_sets},
          {"test_set", r.test_set},
          {"phase", r.phase},
          {"iou", 100.0 * r.iou},
          {"f1", 100.0 * r.f1},
          {"precision", 100.0 * r.precision},
          {"recall", 100.0 * r.recall},
          {"num_samples", r.per_sample.size()},
          {"per_sample", per_sample}};
}

EvalReport eval_report_from_json(const json& doc) {
  EvalReport r;
  r.train_sets = doc.value("train_sets", std::vector<std::string>{});
  r.test_set = doc.value("test_set", std::string{});
  r.phase = doc.value("phase", 0);
  r.iou = doc.value("iou", 0.0) / 100.0;
  r.f1 = doc.value("f1", 0.0) / 100.0;
  r.precision = doc.value("precision", 0.0) / 100.0;
  r.recall = doc.value("recall", 0.0) / 100.0;
  for (const auto& s : doc.value("per_sample", json::array())) {
    r.per_sample.push_back({s.at("id").get<std::string>(), s.value("iou", 0.0), s.value("f1", 0.0),
                            s.value("precision", 0.0), s.value("recall", 0.0)});
  }
  return r;
}

}  // namespace caveline
