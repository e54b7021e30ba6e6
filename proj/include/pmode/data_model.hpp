#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "pmode/common.hpp"

namespace pmode {

/// Physical size of the frontal face of a board, in meters.
struct DimensionLabel {
  double width_m = 0.0;
  double height_m = 0.0;

  bool valid() const;
  friend bool operator==(const DimensionLabel&, const DimensionLabel&) = default;
};

/// One training/evaluation sample. `image` is 8-bit BGR; `depth`, when present,
/// is a CV_32FC1 metric depth raster of the same size.
struct AnnotatedFrame {
  cv::Mat image;
  cv::Mat depth;
  std::vector<Polygon> polygons;
  std::vector<DimensionLabel> labels;
  std::vector<bool> occluded;
  std::optional<std::int64_t> track_id;
  int frame_index = 0;

  int width() const { return image.cols; }
  int height() const { return image.rows; }
};

/// Throws PreconditionError when the frame breaks an invariant. Vertices may lie
/// on the closed frame [0, W] x [0, H] since pixel centers sit at half-integers.
void validate_frame(const AnnotatedFrame& frame);

struct FrameRecord {
  std::int64_t id = 0;
  std::string file;
  int width = 0;
  int height = 0;
  int frame_index = 0;
  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct AnnotationRecord {
  std::int64_t image_id = 0;
  Polygon polygon;
  double width_m = 0.0;
  double height_m = 0.0;
  bool occluded = false;
  std::optional<std::int64_t> track_id;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

struct DatasetManifest {
  std::string camera_profile_id;
  std::vector<FrameRecord> frames;
  std::vector<AnnotationRecord> annotations;

  /// Throws SchemaError / IntegrityError.
  void validate() const;
  const FrameRecord* find_frame(std::int64_t id) const;
  std::vector<const AnnotationRecord*> annotations_for(std::int64_t image_id) const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Rounds to the precision used on disk (9 significant digits). Values passed
/// through this survive a save/load cycle bit-exactly.
double quantize_real(double v);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(std::string_view text);

DatasetManifest load_dataset(const std::filesystem::path& path);
void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Reads every frame image (and depth raster, when `<stem>.depth` exists) referenced
/// by the manifest. Relative file paths resolve against `root`.
std::vector<AnnotatedFrame> load_frames(const DatasetManifest& manifest,
                                        const std::filesystem::path& root);

/// Depth raster file: two little-endian uint32 (H, W) followed by H*W float32.
void write_depth_raster(const std::filesystem::path& path, const cv::Mat& depth);
cv::Mat read_depth_raster(const std::filesystem::path& path);

/// Resamples image and depth to `target` and scales polygon vertices by
/// (W'/W, H'/H). Metric labels are left alone.
AnnotatedFrame resize_frame(const AnnotatedFrame& frame, cv::Size target);

struct MaskRaster {
  cv::Mat mask;  // CV_8UC1, values 0/1
  bool degenerate = false;
};

/// Pixel (i, j) is set iff its center (j + 0.5, i + 0.5) is inside the polygon by
/// the even-odd rule.
MaskRaster polygon_to_mask(const Polygon& polygon, int height, int width);

/// Rasterizes without the bounds precondition; used on scaled or clipped polygons.
cv::Mat rasterize_polygon(const Polygon& polygon, int height, int width);

}  // namespace pmode
