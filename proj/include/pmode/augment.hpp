#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pmode/data_model.hpp"

namespace pmode::augment {

using Rng = std::mt19937_64;

/// Every augmentation is opt-in and randomized from the caller's Rng. Each enabled
/// transform fires with `transform_probability`.
struct AugmentConfig {
  // photometric
  bool brightness_contrast = false;
  double brightness_limit = 0.2;  // additive, fraction of 255
  double contrast_limit = 0.2;    // multiplicative around 1
  bool rgb_shift = false;
  int rgb_shift_limit = 20;
  bool hue_saturation_value = false;
  int hue_shift_limit = 10;  // OpenCV hue units (0..180)
  int sat_shift_limit = 30;
  int val_shift_limit = 20;
  bool jpeg_compression = false;
  int jpeg_quality_min = 60;
  int jpeg_quality_max = 100;
  bool channel_shuffle = false;
  bool median_blur = false;
  int median_blur_ksize = 3;
  double transform_probability = 0.5;

  // geometric
  bool horizontal_flip = false;
  bool vertical_flip = false;
  bool rotate = false;
  double max_rotation_deg = 15.0;

  // label-changing
  double rot90_probability = 0.0;
  int mask_extension_max_px = 0;
  double mask_extension_probability = 0.0;

  std::uint64_t seed = 0;

  void validate() const;
  bool any_photometric() const;
  bool any_geometric() const;
};

/// Enables the photometric set with the default ranges.
AugmentConfig standard_photometric();

// Individual pixel transforms, exposed for testing and reuse.
cv::Mat shuffle_channels(const cv::Mat& image, const std::array<int, 3>& permutation);
cv::Mat median_filter(const cv::Mat& image, int ksize);
cv::Mat jpeg_roundtrip(const cv::Mat& image, int quality);
cv::Mat adjust_brightness_contrast(const cv::Mat& image, double alpha, double beta);
cv::Mat shift_rgb(const cv::Mat& image, const std::array<int, 3>& shift_bgr);
cv::Mat shift_hsv(const cv::Mat& image, int dh, int ds, int dv);

/// Alters pixels only; polygons, labels, flags and depth are copied unchanged.
AnnotatedFrame apply_photometric(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng);

/// Explicit geometric transform parameters, mostly for tests.
struct GeometricParams {
  bool hflip = false;
  bool vflip = false;
  double rotation_deg = 0.0;  // counter-clockwise on screen
};

/// Applies the same map to pixels, depth and polygons. Returns nullopt (frame
/// dropped) when a labeled polygon leaves the frame entirely.
std::optional<AnnotatedFrame> apply_geometric(const AnnotatedFrame& frame, const GeometricParams& params);
std::optional<AnnotatedFrame> apply_geometric(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng);

/// Maps a continuous point through the rotation used by apply_geometric.
Point2 rotate_point(const Point2& p, double rotation_deg, int width, int height);

enum class Rotation90 { Clockwise, CounterClockwise };

/// Rotates image, depth and polygons by 90 degrees and swaps every (w, h) label.
AnnotatedFrame rotate90_with_label_swap(const AnnotatedFrame& frame,
                                        Rotation90 direction = Rotation90::Clockwise);

enum class Axis { Horizontal, Vertical };

/// Stretches each labeled board region by `px` pixels along `axis` and scales the
/// metric label on that axis by the same ratio. nullopt when the stretched board
/// would leave the frame.
std::optional<AnnotatedFrame> extend_mask_length(const AnnotatedFrame& frame, int px, Axis axis);

/// Chains photometric, geometric and the label-changing transforms per the config.
std::optional<AnnotatedFrame> augment_frame(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng);

enum class DepthMode { None, Multiply, Concat };

DepthMode depth_mode_from_string(const std::string& name);
std::string to_string(DepthMode mode);

struct DepthIntegration {
  cv::Mat output;        // CV_32FC1 (multiply) or CV_32FC2 (concat: mask, normalized depth)
  bool flagged = false;  // empty mask; output is the unmodified mask
};

/// Depth normalized as d_min / d, where d_min is the smallest depth under the active
/// (> 0.5) mask pixels, clamped to (0, 1].
DepthIntegration integrate_depth(const cv::Mat& mask, const cv::Mat& depth, DepthMode mode = DepthMode::Multiply);

}  // namespace pmode::augment
