#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pmode/common.hpp"
#include "pmode/data_model.hpp"

namespace pmode::losses {

/// A loss value plus a flag for degenerate inputs (no matched anchors, no clusters).
struct LossValue {
  double value = 0.0;
  bool flagged = false;
};

inline constexpr double kProbEpsilon = 1e-7;

/// Mean binary cross-entropy over pixels, probabilities clamped to [eps, 1 - eps].
/// `grad` (optional) receives dL/dpred.
double bce_segmentation_loss(std::span<const double> pred, std::span<const double> target,
                             std::vector<double>* grad = nullptr);

/// Mean smooth-L1 with the transition at |x| = 1.
double smooth_l1(std::span<const double> pred, std::span<const double> target, std::vector<double>* grad = nullptr);

/// smooth_l1 over (height, width). `pred_hw` is the raw head output in that order.
double hnw_loss(const std::array<double, 2>& pred_hw, const DimensionLabel& label,
                std::array<double, 2>* grad = nullptr);

/// Mean cross-entropy of per-row probability distributions (n x classes, row-major).
/// Returns 0 with the flag set when there are no rows.
LossValue classification_loss(std::span<const double> probs, int classes, std::span<const int> gt_classes,
                              std::vector<double>* grad = nullptr);

struct CornerParams {
  double harris_k = 0.04;
  int harris_block_size = 3;
  double blur_sigma = 1.0;  // Gaussian pre-blur so rasterized diagonal edges do not respond
  int harris_aperture = 3;
  double response_fraction = 0.01;  // of the maximum Harris response
  double dbscan_eps = 5.0;
  int dbscan_min_samples = 3;
  double radius_px = 8.0;
  int reference_size = 128;  // eps and radius are given at this resolution
  double canny_low = 100.0;
  double canny_high = 200.0;

  /// Multiplier applied to eps and radius for a raster of the given size.
  double scale_for(cv::Size size) const;
};

struct CornerClusterSet {
  std::vector<Point2> centroids;
  double radius_px = 0.0;
  int source_mask_id = -1;
  bool flagged = false;  // no corners found
};

/// Density clustering of 2D points. Returns one label per point, -1 for noise.
std::vector<int> dbscan(const std::vector<Point2>& points, double eps, int min_samples);

/// Harris corners on a binary mask (CV_8U, nonzero = inside), clustered with DBSCAN.
CornerClusterSet detect_corner_clusters(const cv::Mat& gt_mask, const CornerParams& params = {},
                                        int source_mask_id = -1);

/// Edge pixels of a binary mask via Canny, as pixel-center points.
std::vector<Point2> mask_edge_points(const cv::Mat& binary_mask, const CornerParams& params = {});

/// Corner alignment loss. Predicted and GT edge centroids are taken inside each cluster's
/// circle; the across-cluster 1 - R^2 is split into per-cluster terms
/// m * |y_j - yhat_j|^2 / SS_tot, each capped at 1. A cluster with no predicted edge pixel
/// in its circle scores 1. Returns the mean. `grad` (optional, same size as pred_mask,
/// CV_64F) gets a straight-through surrogate pulling predictions toward the GT inside
/// each circle, weighted by that cluster's loss.
LossValue corner_alignment_loss(const cv::Mat& pred_mask, const cv::Mat& gt_mask, const CornerClusterSet& clusters,
                                const CornerParams& params = {}, cv::Mat* grad = nullptr);

struct LossReport {
  double l_seg = 0.0;
  double l_corner = 0.0;
  double l_hnw = 0.0;
  double l_bbox = 0.0;
  double l_cls = 0.0;
  double l_total = 0.0;

  LossReport& operator+=(const LossReport& o);
  LossReport scaled(double s) const;
};

/// Unweighted sum. With the corner term disabled it is forced to 0, giving the
/// four-term variant.
LossReport total_loss(double l_seg, double l_corner, double l_hnw, double l_bbox, double l_cls,
                      bool corner_enabled = true);

/// Appends `step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total` rows.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(long step, const LossReport& r);

 private:
  std::ofstream out_;
};

std::string loss_csv_row(long step, const LossReport& r);

}  // namespace pmode::losses
