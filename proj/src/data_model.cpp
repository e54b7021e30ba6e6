#include "pmode/data_model.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

namespace pmode {

using ordered_json = nlohmann::ordered_json;

Box bounding_box(const Polygon& polygon) {
  if (polygon.empty()) return {};
  Box b{polygon[0].x, polygon[0].y, polygon[0].x, polygon[0].y};
  for (const auto& p : polygon) {
    b.x1 = std::min(b.x1, p.x);
    b.y1 = std::min(b.y1, p.y);
    b.x2 = std::max(b.x2, p.x);
    b.y2 = std::max(b.y2, p.y);
  }
  return b;
}

double polygon_area(const Polygon& polygon) {
  const std::size_t n = polygon.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = polygon[i];
    const auto& b = polygon[(i + 1) % n];
    acc += a.x * b.y - b.x * a.y;
  }
  return std::abs(acc) * 0.5;
}

bool DimensionLabel::valid() const {
  return std::isfinite(width_m) && std::isfinite(height_m) && width_m > 0.0 && height_m > 0.0;
}

void validate_frame(const AnnotatedFrame& frame) {
  if (frame.image.empty() || frame.image.type() != CV_8UC3) {
    throw PreconditionError("frame image must be a non-empty 8-bit 3-channel raster");
  }
  if (!frame.depth.empty() &&
      (frame.depth.type() != CV_32FC1 || frame.depth.size() != frame.image.size())) {
    throw PreconditionError("depth raster must be CV_32FC1 with the image size");
  }
  if (frame.polygons.size() != frame.labels.size() ||
      frame.polygons.size() != frame.occluded.size()) {
    throw PreconditionError("polygons, labels and occluded flags must have equal length");
  }
  if (frame.frame_index < 0) throw PreconditionError("frame_index must be >= 0");
  const double w = frame.width();
  const double h = frame.height();
  for (std::size_t i = 0; i < frame.polygons.size(); ++i) {
    const auto& poly = frame.polygons[i];
    if (poly.size() < 3) {
      throw PreconditionError("polygon " + std::to_string(i) + " has fewer than 3 vertices");
    }
    for (const auto& p : poly) {
      if (!(p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h)) {
        throw PreconditionError("polygon " + std::to_string(i) + " has a vertex outside the frame");
      }
    }
    if (!frame.labels[i].valid()) {
      throw PreconditionError("label " + std::to_string(i) + " is not a positive finite size");
    }
  }
}

const FrameRecord* DatasetManifest::find_frame(std::int64_t id) const {
  const FrameRecord* found = nullptr;
  for (const auto& f : frames) {
    if (f.id == id) {
      if (found) return nullptr;
      found = &f;
    }
  }
  return found;
}

std::vector<const AnnotationRecord*> DatasetManifest::annotations_for(std::int64_t image_id) const {
  std::vector<const AnnotationRecord*> out;
  for (const auto& a : annotations) {
    if (a.image_id == image_id) out.push_back(&a);
  }
  return out;
}

void DatasetManifest::validate() const {
  std::map<std::int64_t, int> id_count;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (f.width <= 0 || f.height <= 0) {
      throw SchemaError("frames[" + std::to_string(i) + "]: width and height must be positive");
    }
    if (f.frame_index < 0) {
      throw SchemaError("frames[" + std::to_string(i) + "]: frame_index must be >= 0");
    }
    ++id_count[f.id];
  }
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const auto& a = annotations[i];
    const std::string where = "annotations[" + std::to_string(i) + "]";
    auto it = id_count.find(a.image_id);
    if (it == id_count.end() || it->second != 1) {
      throw IntegrityError(where + ": image_id " + std::to_string(a.image_id) +
                           " does not resolve to exactly one frame");
    }
    if (a.polygon.size() < 3) throw SchemaError(where + ": polygon needs at least 3 vertices");
    if (!DimensionLabel{a.width_m, a.height_m}.valid()) {
      throw SchemaError(where + ": width_m and height_m must be positive and finite");
    }
    const FrameRecord* f = find_frame(a.image_id);
    for (const auto& p : a.polygon) {
      if (!(p.x >= 0.0 && p.x <= f->width && p.y >= 0.0 && p.y <= f->height)) {
        throw SchemaError(where + ": polygon vertex outside frame bounds");
      }
    }
  }
}

double quantize_real(double v) {
  if (!std::isfinite(v)) return v;
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

std::string manifest_to_json(const DatasetManifest& manifest) {
  ordered_json root;
  root["camera_profile_id"] = manifest.camera_profile_id;
  root["frames"] = ordered_json::array();
  for (const auto& f : manifest.frames) {
    ordered_json j;
    j["id"] = f.id;
    j["file"] = f.file;
    j["width"] = f.width;
    j["height"] = f.height;
    j["frame_index"] = f.frame_index;
    root["frames"].push_back(std::move(j));
  }
  root["annotations"] = ordered_json::array();
  for (const auto& a : manifest.annotations) {
    ordered_json j;
    j["image_id"] = a.image_id;
    ordered_json poly = ordered_json::array();
    for (const auto& p : a.polygon) {
      poly.push_back(ordered_json::array({quantize_real(p.x), quantize_real(p.y)}));
    }
    j["polygon"] = std::move(poly);
    j["width_m"] = quantize_real(a.width_m);
    j["height_m"] = quantize_real(a.height_m);
    j["occluded"] = a.occluded;
    if (a.track_id) {
      j["track_id"] = *a.track_id;
    } else {
      j["track_id"] = nullptr;
    }
    root["annotations"].push_back(std::move(j));
  }
  return root.dump(1) + "\n";
}

namespace {

template <typename T>
T require(const ordered_json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw SchemaError(where + ": missing key '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(where + ": key '" + key + "' has the wrong type");
  }
}

const ordered_json& require_array(const ordered_json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key) || !obj.at(key).is_array()) {
    throw SchemaError(where + ": '" + key + "' must be an array");
  }
  return obj.at(key);
}

}  // namespace

DatasetManifest manifest_from_json(std::string_view text) {
  ordered_json root;
  try {
    root = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  DatasetManifest m;
  m.camera_profile_id = require<std::string>(root, "camera_profile_id", "manifest");
  const auto& frames = require_array(root, "frames", "manifest");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string where = "frames[" + std::to_string(i) + "]";
    const auto& j = frames[i];
    FrameRecord f;
    f.id = require<std::int64_t>(j, "id", where);
    f.file = require<std::string>(j, "file", where);
    f.width = require<int>(j, "width", where);
    f.height = require<int>(j, "height", where);
    f.frame_index = require<int>(j, "frame_index", where);
    m.frames.push_back(std::move(f));
  }
  const auto& anns = require_array(root, "annotations", "manifest");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    const auto& j = anns[i];
    AnnotationRecord a;
    a.image_id = require<std::int64_t>(j, "image_id", where);
    const auto& poly = require_array(j, "polygon", where);
    for (const auto& v : poly) {
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw SchemaError(where + ": polygon vertices must be [x, y] number pairs");
      }
      a.polygon.push_back({v[0].get<double>(), v[1].get<double>()});
    }
    a.width_m = require<double>(j, "width_m", where);
    a.height_m = require<double>(j, "height_m", where);
    a.occluded = require<bool>(j, "occluded", where);
    if (!j.contains("track_id")) throw SchemaError(where + ": missing key 'track_id'");
    if (!j.at("track_id").is_null()) a.track_id = require<std::int64_t>(j, "track_id", where);
    m.annotations.push_back(std::move(a));
  }
  m.validate();
  return m;
}

DatasetManifest load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_json(ss.str());
}

void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_json(manifest);
  if (!out) throw IoError("failed while writing " + path.string());
}

void write_depth_raster(const std::filesystem::path& path, const cv::Mat& depth) {
  if (depth.type() != CV_32FC1) throw PreconditionError("depth raster must be CV_32FC1");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write depth raster " + path.string());
  auto put_u32 = [&out](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(static_cast<std::uint32_t>(depth.rows));
  put_u32(static_cast<std::uint32_t>(depth.cols));
  cv::Mat contiguous = depth.isContinuous() ? depth : depth.clone();
  // Host is little-endian (x86-64 / aarch64 targets only).
  out.write(reinterpret_cast<const char*>(contiguous.ptr<float>()),
            static_cast<std::streamsize>(contiguous.total() * sizeof(float)));
  if (!out) throw IoError("failed while writing " + path.string());
}

cv::Mat read_depth_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open depth raster " + path.string());
  unsigned char hdr[8];
  in.read(reinterpret_cast<char*>(hdr), 8);
  if (!in) throw IoError("truncated depth raster header in " + path.string());
  auto u32 = [&hdr](int o) {
    return static_cast<std::uint32_t>(hdr[o]) | (static_cast<std::uint32_t>(hdr[o + 1]) << 8) |
           (static_cast<std::uint32_t>(hdr[o + 2]) << 16) | (static_cast<std::uint32_t>(hdr[o + 3]) << 24);
  };
  const auto rows = u32(0);
  const auto cols = u32(4);
  if (rows == 0 || cols == 0 || rows > 1u << 15 || cols > 1u << 15) {
    throw IoError("implausible depth raster size in " + path.string());
  }
  cv::Mat depth(static_cast<int>(rows), static_cast<int>(cols), CV_32FC1);
  in.read(reinterpret_cast<char*>(depth.ptr<float>()),
          static_cast<std::streamsize>(depth.total() * sizeof(float)));
  if (!in) throw IoError("truncated depth raster payload in " + path.string());
  return depth;
}

std::vector<AnnotatedFrame> load_frames(const DatasetManifest& manifest,
                                        const std::filesystem::path& root) {
  manifest.validate();
  std::vector<AnnotatedFrame> out;
  out.reserve(manifest.frames.size());
  for (const auto& rec : manifest.frames) {
    std::filesystem::path file = rec.file;
    if (file.is_relative()) file = root / file;
    AnnotatedFrame frame;
    frame.image = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (frame.image.empty()) throw IoError("cannot read frame image " + file.string());
    if (frame.image.cols != rec.width || frame.image.rows != rec.height) {
      throw IntegrityError("frame " + std::to_string(rec.id) + " image size differs from manifest");
    }
    auto depth_file = file;
    depth_file.replace_extension(".depth");
    if (std::filesystem::exists(depth_file)) frame.depth = read_depth_raster(depth_file);
    frame.frame_index = rec.frame_index;
    for (const auto* a : manifest.annotations_for(rec.id)) {
      frame.polygons.push_back(a->polygon);
      frame.labels.push_back({a->width_m, a->height_m});
      frame.occluded.push_back(a->occluded);
      if (a->track_id) frame.track_id = a->track_id;
    }
    validate_frame(frame);
    out.push_back(std::move(frame));
  }
  return out;
}

AnnotatedFrame resize_frame(const AnnotatedFrame& frame, cv::Size target) {
  if (target.width < 1 || target.height < 1) {
    throw PreconditionError("resize target must be at least 1x1");
  }
  AnnotatedFrame out = frame;
  const double sx = static_cast<double>(target.width) / frame.width();
  const double sy = static_cast<double>(target.height) / frame.height();
  if (target != frame.image.size()) {
    const bool shrink = target.width < frame.width() && target.height < frame.height();
    cv::resize(frame.image, out.image, target, 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
    if (!frame.depth.empty()) {
      cv::resize(frame.depth, out.depth, target, 0, 0, cv::INTER_NEAREST);
    }
  } else {
    out.image = frame.image.clone();
    if (!frame.depth.empty()) out.depth = frame.depth.clone();
  }
  for (auto& poly : out.polygons) {
    for (auto& p : poly) {
      p.x *= sx;
      p.y *= sy;
    }
  }
  return out;
}

cv::Mat rasterize_polygon(const Polygon& polygon, int height, int width) {
  cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
  const std::size_t n = polygon.size();
  if (n < 3) return mask;
  std::vector<double> xs;
  for (int i = 0; i < height; ++i) {
    const double yc = i + 0.5;
    xs.clear();
    for (std::size_t e = 0; e < n; ++e) {
      const Point2& a = polygon[e];
      const Point2& b = polygon[(e + 1) % n];
      if ((a.y > yc) != (b.y > yc)) {
        xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
      }
    }
    if (xs.empty()) continue;
    std::sort(xs.begin(), xs.end());
    auto* row = mask.ptr<unsigned char>(i);
    for (int j = 0; j < width; ++j) {
      const double xc = j + 0.5;
      // Crossings strictly to the right of the center; odd means inside.
      const auto right = xs.end() - std::upper_bound(xs.begin(), xs.end(), xc);
      if (right % 2 == 1) row[j] = 1;
    }
  }
  return mask;
}

MaskRaster polygon_to_mask(const Polygon& polygon, int height, int width) {
  if (height < 1 || width < 1) throw PreconditionError("mask size must be positive");
  if (polygon.size() < 3) throw PreconditionError("polygon needs at least 3 vertices");
  for (const auto& p : polygon) {
    if (!(p.x >= 0.0 && p.x <= width && p.y >= 0.0 && p.y <= height)) {
      throw PreconditionError("polygon vertex outside the raster bounds");
    }
  }
  MaskRaster out;
  if (polygon_area(polygon) < 1e-12) {
    out.mask = cv::Mat::zeros(height, width, CV_8UC1);
    out.degenerate = true;
    return out;
  }
  out.mask = rasterize_polygon(polygon, height, width);
  return out;
}

}  // namespace pmode
