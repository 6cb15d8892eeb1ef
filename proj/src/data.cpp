#include "caveline/data.hpp"

#include <fstream>
#include <unordered_set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "caveline/error.hpp"

namespace caveline {

using nlohmann::json;

std::string to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::kHuman: return "HUMAN";
    case LabelKind::kWeakPositive: return "WEAK_POSITIVE";
    case LabelKind::kNegativeRelabeled: return "NEGATIVE_RELABELED";
    case LabelKind::kUnlabeled: return "UNLABELED";
  }
  return "UNLABELED";
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "TRAIN";
    case Split::kVal: return "VAL";
    case Split::kTest: return "TEST";
  }
  return "TRAIN";
}

LabelKind parse_label_kind(const std::string& text) {
  if (text == "HUMAN") return LabelKind::kHuman;
  if (text == "WEAK_POSITIVE") return LabelKind::kWeakPositive;
  if (text == "NEGATIVE_RELABELED") return LabelKind::kNegativeRelabeled;
  if (text == "UNLABELED") return LabelKind::kUnlabeled;
  throw Error(ErrorCode::kInvalidManifest, "unknown label_kind '" + text + "'");
}

Split parse_split(const std::string& text) {
  if (text == "TRAIN") return Split::kTrain;
  if (text == "VAL") return Split::kVal;
  if (text == "TEST") return Split::kTest;
  throw Error(ErrorCode::kInvalidSplit, "unknown split '" + text + "'");
}

bool DatasetManifest::operator==(const DatasetManifest& other) const {
  if (name != other.name || samples.size() != other.samples.size()) return false;
  auto resolved = [](const fs::path& root, const fs::path& rel) { return (root / rel).lexically_normal(); };
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i];
    const auto& b = other.samples[i];
    if (a.id != b.id || a.label_kind != b.label_kind || a.location_tag != b.location_tag || a.split != b.split) {
      return false;
    }
    if (resolved(root, a.image) != resolved(other.root, b.image)) return false;
    if (a.mask.has_value() != b.mask.has_value()) return false;
    if (a.mask && resolved(root, *a.mask) != resolved(other.root, *b.mask)) return false;
  }
  return true;
}

const ManifestEntry* DatasetManifest::find(const std::string& id) const {
  for (const auto& entry : samples) {
    if (entry.id == id) return &entry;
  }
  return nullptr;
}

std::vector<std::string> DatasetManifest::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& entry : samples) {
    if (entry.split == split) out.push_back(entry.id);
  }
  return out;
}

json manifest_to_json(const DatasetManifest& manifest) {
  json samples = json::array();
  for (const auto& entry : manifest.samples) {
    json item = {{"id", entry.id},
                 {"image", entry.image.generic_string()},
                 {"label_kind", to_string(entry.label_kind)},
                 {"location_tag", entry.location_tag},
                 {"split", to_string(entry.split)}};
    if (entry.mask) item["mask"] = entry.mask->generic_string();
    samples.push_back(std::move(item));
  }
  return {{"name", manifest.name}, {"samples", std::move(samples)}};
}

DatasetManifest manifest_from_json(const json& doc, const fs::path& root) {
  if (!doc.is_object()) throw Error(ErrorCode::kInvalidManifest, "manifest must be a JSON object");
  DatasetManifest manifest;
  manifest.root = root;
  manifest.name = doc.value("name", std::string{});
  if (!doc.contains("samples")) return manifest;
  if (!doc["samples"].is_array()) throw Error(ErrorCode::kInvalidManifest, "'samples' must be an array");

  std::unordered_set<std::string> seen;
  for (const auto& item : doc["samples"]) {
    if (!item.is_object() || !item.contains("id") || !item.contains("image")) {
      throw Error(ErrorCode::kInvalidManifest, "sample needs 'id' and 'image'");
    }
    ManifestEntry entry;
    entry.id = item["id"].get<std::string>();
    if (!seen.insert(entry.id).second) throw Error(ErrorCode::kDuplicateId, entry.id);
    entry.image = item["image"].get<std::string>();
    if (item.contains("mask") && !item["mask"].is_null()) entry.mask = fs::path(item["mask"].get<std::string>());
    if (item.contains("label_kind")) {
      entry.label_kind = parse_label_kind(item["label_kind"].get<std::string>());
    } else {
      entry.label_kind = entry.mask ? LabelKind::kHuman : LabelKind::kUnlabeled;
    }
    entry.location_tag = item.value("location_tag", std::string{});
    if (item.contains("split")) {
      if (!item["split"].is_string()) throw Error(ErrorCode::kInvalidSplit, entry.id);
      entry.split = parse_split(item["split"].get<std::string>());
    }
    if ((entry.label_kind == LabelKind::kWeakPositive ||
         entry.label_kind == LabelKind::kNegativeRelabeled) && !entry.mask) {
      throw Error(ErrorCode::kInvalidManifest, entry.id + ": " + to_string(entry.label_kind) + " requires a mask");
    }
    if (!fs::exists(root / entry.image)) {
      throw Error(ErrorCode::kMissingFile, (root / entry.image).string());
    }
    if (entry.mask && !fs::exists(root / *entry.mask)) {
      throw Error(ErrorCode::kMissingFile, (root / *entry.mask).string());
    }
    manifest.samples.push_back(std::move(entry));
  }
  return manifest;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingFile, path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidManifest, path.string() + ": " + e.what());
  }
  return manifest_from_json(doc, path.parent_path());
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  DatasetManifest rebased = manifest;
  if (!manifest.root.empty() && fs::weakly_canonical(manifest.root) != fs::weakly_canonical(dir)) {
    for (auto& entry : rebased.samples) {
      entry.image = fs::relative(manifest.root / entry.image, dir);
      if (entry.mask) entry.mask = fs::relative(manifest.root / *entry.mask, dir);
    }
  }
  fs::create_directories(dir);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << manifest_to_json(rebased).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

cv::Mat read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorCode::kIoFailure, "cannot decode " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(rgb, CV_32FC3, 1.0 / 255.0);
  return rgb;
}

cv::Mat read_mask(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw Error(ErrorCode::kIoFailure, "cannot decode " + path.string());
  cv::Mat mask;
  cv::threshold(gray, mask, 127, 1, cv::THRESH_BINARY);
  return mask;
}

void write_rgb(const fs::path& path, const cv::Mat& rgb01) {
  cv::Mat u8, bgr;
  rgb01.convertTo(u8, CV_8UC3, 255.0);
  cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

void write_mask(const fs::path& path, const cv::Mat& mask01) {
  cv::Mat u8;
  mask01.convertTo(u8, CV_8UC1);
  u8 *= 255;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), u8)) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

ImageSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry, cv::Size size) {
  ImageSample sample;
  sample.id = entry.id;
  sample.label_kind = entry.label_kind;
  sample.location_tag = entry.location_tag;
  sample.image = read_rgb(manifest.image_path(entry));
  if (sample.image.size() != size) {
    cv::Mat resized;
    cv::resize(sample.image, resized, size, 0, 0, cv::INTER_AREA);
    sample.image = resized;
  }
  if (auto mask_path = manifest.mask_path(entry)) {
    cv::Mat mask = read_mask(*mask_path);
    if (mask.size() != size) {
      cv::Mat resized;
      cv::resize(mask, resized, size, 0, 0, cv::INTER_NEAREST);
      mask = resized;
    }
    sample.mask = mask;
  }
  return sample;
}

cv::Mat binarize(const cv::Mat& prob, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "threshold must lie in (0,1)");
  }
  cv::Mat as_float;
  prob.convertTo(as_float, CV_32F);
  cv::Mat out(prob.size(), CV_8UC1);
  const auto t = static_cast<float>(threshold);
  for (int y = 0; y < as_float.rows; ++y) {
    const float* src = as_float.ptr<float>(y);
    std::uint8_t* dst = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < as_float.cols; ++x) dst[x] = src[x] >= t ? 1 : 0;
  }
  return out;
}

cv::Mat rasterize_polyline(const std::vector<cv::Point2f>& points, int brush_width, cv::Size size) {
  if (brush_width < 1) throw Error(ErrorCode::kInvalidArgument, "brush width must be >= 1");
  cv::Mat mask = cv::Mat::zeros(size, CV_8UC1);
  if (points.empty()) return mask;
  std::vector<cv::Point> pts;
  pts.reserve(points.size());
  for (const auto& p : points) pts.emplace_back(cvRound(p.x), cvRound(p.y));
  if (pts.size() == 1) {
    cv::circle(mask, pts[0], std::max(0, brush_width / 2), cv::Scalar(1), cv::FILLED, cv::LINE_8);
  } else {
    cv::polylines(mask, pts, false, cv::Scalar(1), brush_width, cv::LINE_8);
  }
  return mask;
}

}  // namespace caveline
