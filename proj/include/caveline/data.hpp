#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"

namespace caveline {

namespace fs = std::filesystem;

inline constexpr int kWorkingWidth = 960;
inline constexpr int kWorkingHeight = 540;

enum class LabelKind { kHuman, kWeakPositive, kNegativeRelabeled, kUnlabeled };
enum class Split { kTrain, kVal, kTest };

std::string to_string(LabelKind kind);
std::string to_string(Split split);
LabelKind parse_label_kind(const std::string& text);
Split parse_split(const std::string& text);

/// One decoded frame. `image` is CV_32FC3 in RGB order with values in [0,1];
/// `mask`, when present, is CV_8UC1 holding exactly 0 or 1.
struct ImageSample {
  std::string id;
  cv::Mat image;
  std::optional<cv::Mat> mask;
  LabelKind label_kind = LabelKind::kUnlabeled;
  std::string location_tag;
};

struct ManifestEntry {
  std::string id;
  fs::path image;  // relative to DatasetManifest::root
  std::optional<fs::path> mask;
  LabelKind label_kind = LabelKind::kUnlabeled;
  std::string location_tag;
  Split split = Split::kTrain;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestEntry> samples;
  fs::path root;  // directory the relative paths resolve against

  const ManifestEntry* find(const std::string& id) const;
  std::vector<std::string> ids(Split split) const;
  fs::path image_path(const ManifestEntry& entry) const { return root / entry.image; }
  std::optional<fs::path> mask_path(const ManifestEntry& entry) const {
    if (!entry.mask) return std::nullopt;
    return root / *entry.mask;
  }

  /// Field-wise equality with file references compared after resolution
  /// against each manifest's root.
  bool operator==(const DatasetManifest& other) const;
};

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
/// Parses and validates; `root` is used to resolve and check file references.
DatasetManifest manifest_from_json(const nlohmann::json& doc, const fs::path& root);

/// Reads a manifest JSON file and checks every invariant: unique ids, known
/// splits and label kinds, referenced files present.
DatasetManifest load_manifest(const fs::path& path);
/// Writes `manifest` to `path`; sample paths are stored relative to the
/// manifest's own directory.
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

/// Loads the raster pair for `entry`, resizing to `size` when needed (area
/// interpolation for the image, nearest-neighbour for the mask).
ImageSample load_sample(const DatasetManifest& manifest, const ManifestEntry& entry,
                        cv::Size size = {kWorkingWidth, kWorkingHeight});

cv::Mat read_rgb(const fs::path& path);
/// Grayscale PNG with {0,255} (any value >127 counts as foreground) -> {0,1}.
cv::Mat read_mask(const fs::path& path);
void write_rgb(const fs::path& path, const cv::Mat& rgb01);
void write_mask(const fs::path& path, const cv::Mat& mask01);

/// output = 1 where prob >= threshold.
cv::Mat binarize(const cv::Mat& prob, double threshold = 0.5);

/// Rasterizes a polyline with a round brush of `brush_width` pixels.
cv::Mat rasterize_polyline(const std::vector<cv::Point2f>& points, int brush_width, cv::Size size);

enum class Background { kFlat, kTextured, kGradient, kClutter };
enum class Illumination { kUniform, kSpotlight, kLowLight };

struct SyntheticSpec {
  std::string name = "synthetic";
  int count = 1050;
  std::array<double, 3> line_color_lo{0.85, 0.80, 0.55};
  std::array<double, 3> line_color_hi{1.00, 1.00, 0.95};
  int thickness_min = 2;
  int thickness_max = 6;
  Background background = Background::kTextured;
  int distractors = 3;
  Illumination illumination = Illumination::kUniform;
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
  int width = kWorkingWidth;
  int height = kWorkingHeight;
  bool straight_lines = false;
  std::string location_tag = "synthetic";
  double val_fraction = 0.0;
  double test_fraction = 0.0;
  std::string id_prefix = "s";

  void validate() const;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc);

/// Geometry of one rendered caveline, kept so that tests can re-render it.
struct CavelineGeometry {
  std::vector<cv::Point> polyline;
  int thickness = 1;
  cv::Vec3d color;
};

struct SyntheticFrame {
  cv::Mat image;  // CV_32FC3 RGB in [0,1]
  cv::Mat mask;   // CV_8UC1 {0,1}
  CavelineGeometry line;
};

/// Renders frame `index` of `spec`. Depends only on (spec, index).
SyntheticFrame render_synthetic(const SyntheticSpec& spec, int index);

/// Writes `spec.count` image/mask pairs under `out_dir` together with
/// `manifest.json` and returns the manifest.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir);

/// Three-location dataset for leave-one-out experiments: one SyntheticSpec per
/// location, each with its own look, written into a single manifest.
DatasetManifest generate_multi_location(const std::vector<SyntheticSpec>& specs,
                                        const fs::path& out_dir, const std::string& name);

/// Small deterministic generator whose output does not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  double uniform();  // [0,1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);  // inclusive
  double normal();

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

}  // namespace caveline
