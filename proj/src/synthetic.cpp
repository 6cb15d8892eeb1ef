#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "caveline/data.hpp"
#include "caveline/error.hpp"

namespace caveline {

using nlohmann::json;

// splitmix64
std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

int Rng::uniform_int(int lo, int hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  if (spare_) {
    double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

const char* background_name(Background b) {
  switch (b) {
    case Background::kFlat: return "FLAT";
    case Background::kTextured: return "TEXTURED";
    case Background::kGradient: return "GRADIENT";
    case Background::kClutter: return "CLUTTER";
  }
  return "FLAT";
}

const char* illumination_name(Illumination i) {
  switch (i) {
    case Illumination::kUniform: return "UNIFORM";
    case Illumination::kSpotlight: return "SPOTLIGHT";
    case Illumination::kLowLight: return "LOW_LIGHT";
  }
  return "UNIFORM";
}

Background parse_background(const std::string& s) {
  if (s == "FLAT") return Background::kFlat;
  if (s == "TEXTURED") return Background::kTextured;
  if (s == "GRADIENT") return Background::kGradient;
  if (s == "CLUTTER") return Background::kClutter;
  throw Error(ErrorCode::kInvalidConfig, "unknown background '" + s + "'");
}

Illumination parse_illumination(const std::string& s) {
  if (s == "UNIFORM") return Illumination::kUniform;
  if (s == "SPOTLIGHT") return Illumination::kSpotlight;
  if (s == "LOW_LIGHT") return Illumination::kLowLight;
  throw Error(ErrorCode::kInvalidConfig, "unknown illumination '" + s + "'");
}

cv::Vec3d random_color(Rng& rng, const std::array<double, 3>& lo, const std::array<double, 3>& hi) {
  return {rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(lo[2], hi[2])};
}

// Underwater-ish dark blue/green/brown base tones.
cv::Vec3d base_tone(Rng& rng) {
  return {rng.uniform(0.05, 0.30), rng.uniform(0.15, 0.40), rng.uniform(0.20, 0.45)};
}

cv::Mat render_background(const SyntheticSpec& spec, Rng& rng) {
  const cv::Size size(spec.width, spec.height);
  cv::Mat img(size, CV_32FC3);
  const cv::Vec3d base = base_tone(rng);
  switch (spec.background) {
    case Background::kFlat:
      img.setTo(cv::Scalar(base[0], base[1], base[2]));
      break;
    case Background::kGradient: {
      const cv::Vec3d other = base_tone(rng);
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double dx = std::cos(angle), dy = std::sin(angle);
      const double extent = std::abs(dx) * spec.width + std::abs(dy) * spec.height;
      const double offset = std::min(0.0, dx * spec.width) + std::min(0.0, dy * spec.height);
      for (int y = 0; y < spec.height; ++y) {
        auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < spec.width; ++x) {
          const double t = (dx * x + dy * y - offset) / extent;
          const cv::Vec3d c = base * (1.0 - t) + other * t;
          row[x] = cv::Vec3f(static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2]));
        }
      }
      break;
    }
    case Background::kTextured: {
      const int gw = std::max(2, spec.width / 24), gh = std::max(2, spec.height / 24);
      cv::Mat coarse(gh, gw, CV_32FC3);
      for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
          const double v = rng.uniform(-0.12, 0.12);
          coarse.at<cv::Vec3f>(y, x) = cv::Vec3f(static_cast<float>(base[0] + v + rng.uniform(-0.03, 0.03)),
                                                 static_cast<float>(base[1] + v + rng.uniform(-0.03, 0.03)),
                                                 static_cast<float>(base[2] + v + rng.uniform(-0.03, 0.03)));
        }
      }
      cv::resize(coarse, img, size, 0, 0, cv::INTER_CUBIC);
      break;
    }
    case Background::kClutter: {
      img.setTo(cv::Scalar(base[0], base[1], base[2]));
      const int blobs = 40;
      for (int i = 0; i < blobs; ++i) {
        const cv::Point center(rng.uniform_int(0, spec.width - 1), rng.uniform_int(0, spec.height - 1));
        const cv::Size axes(rng.uniform_int(spec.width / 40 + 1, spec.width / 8 + 2),
                            rng.uniform_int(spec.height / 40 + 1, spec.height / 8 + 2));
        const double shade = rng.uniform(-0.12, 0.12);
        const cv::Scalar color(base[0] + shade, base[1] + shade, base[2] + shade);
        cv::ellipse(img, center, axes, rng.uniform(0.0, 180.0), 0, 360, color, cv::FILLED, cv::LINE_8);
      }
      break;
    }
  }
  return img;
}

void draw_distractors(const SyntheticSpec& spec, cv::Mat& img, Rng& rng) {
  for (int i = 0; i < spec.distractors; ++i) {
    const cv::Point center(rng.uniform_int(0, spec.width - 1), rng.uniform_int(0, spec.height - 1));
    const double shade = rng.uniform(0.2, 0.7);
    const cv::Scalar color(shade * rng.uniform(0.6, 1.0), shade * rng.uniform(0.6, 1.0), shade * rng.uniform(0.6, 1.0));
    if (rng.uniform() < 0.5) {
      const cv::Size axes(rng.uniform_int(3, spec.width / 20 + 4), rng.uniform_int(3, spec.height / 20 + 4));
      cv::ellipse(img, center, axes, rng.uniform(0.0, 180.0), 0, 360, color, cv::FILLED, cv::LINE_8);
    } else {
      const int w = rng.uniform_int(4, spec.width / 16 + 5), h = rng.uniform_int(4, spec.height / 16 + 5);
      cv::rectangle(img, cv::Rect(center.x - w / 2, center.y - h / 2, w, h), color, cv::FILLED, cv::LINE_8);
    }
  }
}

cv::Point2d catmull_rom(const cv::Point2d& p0, const cv::Point2d& p1, const cv::Point2d& p2,
                        const cv::Point2d& p3, double t) {
  const double t2 = t * t, t3 = t2 * t;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
}

std::vector<cv::Point> caveline_path(const SyntheticSpec& spec, Rng& rng) {
  const double w = spec.width, h = spec.height;
  const double margin = 0.04 * std::min(w, h) + spec.thickness_max;
  const cv::Point2d center(rng.uniform(0.3 * w, 0.7 * w), rng.uniform(0.3 * h, 0.7 * h));
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const cv::Point2d dir(std::cos(angle), std::sin(angle));

  // Longest chord through `center` along `dir` that stays inside the margin box.
  auto reach = [&](cv::Point2d d) {
    double t = 1e18;
    if (d.x > 1e-9) t = std::min(t, (w - 1 - margin - center.x) / d.x);
    if (d.x < -1e-9) t = std::min(t, (margin - center.x) / d.x);
    if (d.y > 1e-9) t = std::min(t, (h - 1 - margin - center.y) / d.y);
    if (d.y < -1e-9) t = std::min(t, (margin - center.y) / d.y);
    return t;
  };
  const double fwd = reach(dir) * rng.uniform(0.6, 1.0);
  const double back = reach(-dir) * rng.uniform(0.6, 1.0);
  const cv::Point2d start = center - dir * back;
  const cv::Point2d end = center + dir * fwd;

  auto clamp = [&](cv::Point2d p) {
    return cv::Point2d(std::clamp(p.x, margin, w - 1 - margin), std::clamp(p.y, margin, h - 1 - margin));
  };

  std::vector<cv::Point> path;
  if (spec.straight_lines) {
    path.emplace_back(cvRound(start.x), cvRound(start.y));
    path.emplace_back(cvRound(end.x), cvRound(end.y));
    return path;
  }

  const int controls = rng.uniform_int(3, 6);
  const double length = cv::norm(end - start);
  const cv::Point2d normal(-dir.y, dir.x);
  std::vector<cv::Point2d> ctrl;
  for (int i = 0; i < controls; ++i) {
    const double t = static_cast<double>(i) / (controls - 1);
    const double jitter = (i == 0 || i == controls - 1) ? 0.0 : rng.uniform(-0.08, 0.08) * length;
    ctrl.push_back(clamp(start + (end - start) * t + normal * jitter));
  }
  std::vector<cv::Point2d> padded;
  padded.push_back(ctrl.front());
  padded.insert(padded.end(), ctrl.begin(), ctrl.end());
  padded.push_back(ctrl.back());
  for (std::size_t i = 1; i + 2 < padded.size(); ++i) {
    const double span = cv::norm(padded[i + 1] - padded[i]);
    const int steps = std::max(2, static_cast<int>(span / 4.0));
    for (int s = 0; s < steps; ++s) {
      const cv::Point2d p = clamp(catmull_rom(padded[i - 1], padded[i], padded[i + 1], padded[i + 2],
                                              static_cast<double>(s) / steps));
      const cv::Point q(cvRound(p.x), cvRound(p.y));
      if (path.empty() || path.back() != q) path.push_back(q);
    }
  }
  const cv::Point last(cvRound(ctrl.back().x), cvRound(ctrl.back().y));
  if (path.empty() || path.back() != last) path.push_back(last);
  return path;
}

void apply_illumination(const SyntheticSpec& spec, cv::Mat& img, Rng& rng) {
  switch (spec.illumination) {
    case Illumination::kUniform:
      break;
    case Illumination::kLowLight:
      img *= 0.35;
      break;
    case Illumination::kSpotlight: {
      const cv::Point2d c(rng.uniform(0.3, 0.7) * spec.width, rng.uniform(0.3, 0.7) * spec.height);
      const double radius = rng.uniform(0.4, 0.8) * std::max(spec.width, spec.height);
      for (int y = 0; y < img.rows; ++y) {
        auto* row = img.ptr<cv::Vec3f>(y);
        for (int x = 0; x < img.cols; ++x) {
          const double d = std::hypot(x - c.x, y - c.y) / radius;
          row[x] *= static_cast<float>(std::clamp(1.15 - 0.85 * d * d, 0.15, 1.15));
        }
      }
      break;
    }
  }
}

}  // namespace

void SyntheticSpec::validate() const {
  if (count < 1) throw Error(ErrorCode::kInvalidConfig, "count must be >= 1");
  if (thickness_min < 1 || thickness_max > 20 || thickness_min > thickness_max) {
    throw Error(ErrorCode::kInvalidConfig, "thickness range must lie within [1,20] and be non-empty");
  }
  for (int c = 0; c < 3; ++c) {
    if (line_color_lo[c] > line_color_hi[c] || line_color_lo[c] < 0.0 || line_color_hi[c] > 1.0) {
      throw Error(ErrorCode::kInvalidConfig, "line color range must be non-empty and within [0,1]");
    }
  }
  if (width < 16 || height < 16) throw Error(ErrorCode::kInvalidConfig, "raster too small");
  if (distractors < 0 || noise_sigma < 0.0) throw Error(ErrorCode::kInvalidConfig, "negative distractors/noise");
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction > 1.0) {
    throw Error(ErrorCode::kInvalidConfig, "split fractions must be in [0,1] and sum to <= 1");
  }
}

json to_json(const SyntheticSpec& spec) {
  return {{"name", spec.name},
          {"count", spec.count},
          {"line_color_range", {spec.line_color_lo, spec.line_color_hi}},
          {"line_thickness_range", {spec.thickness_min, spec.thickness_max}},
          {"background", background_name(spec.background)},
          {"distractors", spec.distractors},
          {"illumination", illumination_name(spec.illumination)},
          {"noise_sigma", spec.noise_sigma},
          {"seed", spec.seed},
          {"width", spec.width},
          {"height", spec.height},
          {"straight_lines", spec.straight_lines},
          {"location_tag", spec.location_tag},
          {"val_fraction", spec.val_fraction},
          {"test_fraction", spec.test_fraction},
          {"id_prefix", spec.id_prefix}};
}

SyntheticSpec synthetic_spec_from_json(const json& doc) {
  SyntheticSpec spec;
  try {
    spec.name = doc.value("name", spec.name);
    spec.count = doc.value("count", spec.count);
    if (doc.contains("line_color_range")) {
      spec.line_color_lo = doc["line_color_range"].at(0).get<std::array<double, 3>>();
      spec.line_color_hi = doc["line_color_range"].at(1).get<std::array<double, 3>>();
    }
    if (doc.contains("line_thickness_range")) {
      spec.thickness_min = doc["line_thickness_range"].at(0).get<int>();
      spec.thickness_max = doc["line_thickness_range"].at(1).get<int>();
    }
    if (doc.contains("background")) spec.background = parse_background(doc["background"].get<std::string>());
    spec.distractors = doc.value("distractors", spec.distractors);
    if (doc.contains("illumination")) spec.illumination = parse_illumination(doc["illumination"].get<std::string>());
    spec.noise_sigma = doc.value("noise_sigma", spec.noise_sigma);
    spec.seed = doc.value("seed", spec.seed);
    spec.width = doc.value("width", spec.width);
    spec.height = doc.value("height", spec.height);
    spec.straight_lines = doc.value("straight_lines", spec.straight_lines);
    spec.location_tag = doc.value("location_tag", spec.location_tag);
    spec.val_fraction = doc.value("val_fraction", spec.val_fraction);
    spec.test_fraction = doc.value("test_fraction", spec.test_fraction);
    spec.id_prefix = doc.value("id_prefix", spec.id_prefix);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("synthetic spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

SyntheticFrame render_synthetic(const SyntheticSpec& spec, int index) {
  spec.validate();
  Rng rng(spec.seed * 0x100000001B3ULL + static_cast<std::uint64_t>(index) * 0x9E3779B97F4A7C15ULL + 1);

  SyntheticFrame frame;
  frame.image = render_background(spec, rng);
  draw_distractors(spec, frame.image, rng);

  frame.line.thickness = rng.uniform_int(spec.thickness_min, spec.thickness_max);
  frame.line.color = random_color(rng, spec.line_color_lo, spec.line_color_hi);
  frame.line.polyline = caveline_path(spec, rng);

  frame.mask = cv::Mat::zeros(spec.height, spec.width, CV_8UC1);
  cv::polylines(frame.mask, frame.line.polyline, false, cv::Scalar(1), frame.line.thickness, cv::LINE_8);

  for (int y = 0; y < spec.height; ++y) {
    const auto* m = frame.mask.ptr<std::uint8_t>(y);
    auto* row = frame.image.ptr<cv::Vec3f>(y);
    for (int x = 0; x < spec.width; ++x) {
      if (!m[x]) continue;
      const double grain = rng.uniform(-0.05, 0.05);
      row[x] = cv::Vec3f(static_cast<float>(frame.line.color[0] + grain),
                         static_cast<float>(frame.line.color[1] + grain),
                         static_cast<float>(frame.line.color[2] + grain));
    }
  }

  apply_illumination(spec, frame.image, rng);
  if (spec.noise_sigma > 0.0) {
    for (int y = 0; y < spec.height; ++y) {
      auto* row = frame.image.ptr<cv::Vec3f>(y);
      for (int x = 0; x < spec.width; ++x) {
        for (int c = 0; c < 3; ++c) row[x][c] += static_cast<float>(spec.noise_sigma * rng.normal());
      }
    }
  }
  cv::Mat flat = frame.image.reshape(1);
  cv::max(flat, 0.0, flat);
  cv::min(flat, 1.0, flat);
  return frame;
}

namespace {

void append_frames(const SyntheticSpec& spec, const fs::path& out_dir, DatasetManifest& manifest) {
  spec.validate();
  const int n_test = static_cast<int>(std::lround(spec.count * spec.test_fraction));
  const int n_val = static_cast<int>(std::lround(spec.count * spec.val_fraction));
  const int width = std::max(4, static_cast<int>(std::to_string(spec.count - 1).size()));
  for (int i = 0; i < spec.count; ++i) {
    std::string digits = std::to_string(i);
    const std::string id = spec.id_prefix + std::string(width - std::min<int>(width, digits.size()), '0') + digits;
    if (manifest.find(id)) throw Error(ErrorCode::kDuplicateId, id);
    const SyntheticFrame frame = render_synthetic(spec, i);
    ManifestEntry entry;
    entry.id = id;
    entry.image = fs::path("images") / (id + ".png");
    entry.mask = fs::path("masks") / (id + ".png");
    entry.label_kind = LabelKind::kHuman;
    entry.location_tag = spec.location_tag;
    if (i >= spec.count - n_test) {
      entry.split = Split::kTest;
    } else if (i >= spec.count - n_test - n_val) {
      entry.split = Split::kVal;
    } else {
      entry.split = Split::kTrain;
    }
    write_rgb(out_dir / entry.image, frame.image);
    write_mask(out_dir / *entry.mask, frame.mask);
    manifest.samples.push_back(std::move(entry));
  }
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  DatasetManifest manifest;
  manifest.name = spec.name;
  manifest.root = out_dir;
  append_frames(spec, out_dir, manifest);
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

DatasetManifest generate_multi_location(const std::vector<SyntheticSpec>& specs, const fs::path& out_dir,
                                        const std::string& name) {
  DatasetManifest manifest;
  manifest.name = name;
  manifest.root = out_dir;
  for (const auto& spec : specs) append_frames(spec, out_dir, manifest);
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace caveline
