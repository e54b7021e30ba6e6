#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "pmode/augment.hpp"
#include "pmode/data_model.hpp"
#include "pmode/losses.hpp"
#include "pmode/net_core.hpp"
#include "pmode/nn.hpp"

namespace pmode::train {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  nn::OptimizerConfig optimizer;  // SGD, momentum 0.9, lr 1e-3 by default
  std::string schedule = "cosine";  // "cosine" or "constant"
  std::uint64_t seed = 0;
  net::NetworkConfig network;       // network.depth_mode is the depth integration mode
  augment::AugmentConfig augment;
  bool corner_loss_enabled = true;
  losses::CornerParams corner;
  std::filesystem::path dataset;     // manifest JSON
  std::filesystem::path output_dir;
  int eval_interval = 1;             // epochs between validations
  double val_fraction = 0.2;
  double positive_iou = 0.5;
  double negative_iou = 0.4;
  int negatives_per_positive = 3;
  int max_mask_positives = 4;        // per ground-truth instance
  bool deterministic = true;

  /// Throws SchemaError; with `check_paths`, PreconditionError for missing inputs.
  void validate(bool check_paths = false) const;
};

nlohmann::ordered_json augment_config_to_json(const augment::AugmentConfig& cfg);
augment::AugmentConfig augment_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
/// Relative paths resolve against `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
TrainConfig load_train_config(const std::filesystem::path& path);

struct TrackSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Groups frames by track_id (untracked frames are their own group) and sends about
/// `val_fraction` of the groups to validation. Never splits a track.
TrackSplit split_by_track(const std::vector<AnnotatedFrame>& frames, double val_fraction, std::uint64_t seed);

/// Ground truth for one instance in input-resolution pixels.
struct InstanceTarget {
  Box box;                // input pixels
  cv::Mat mask;           // input resolution, CV_8U 0/1
  cv::Mat proto_mask;     // prototype grid, CV_32F 0/1
  DimensionLabel label;
  losses::CornerClusterSet clusters;
};

/// `frame` must already be input_size x input_size.
std::vector<InstanceTarget> build_targets(const AnnotatedFrame& frame, const net::PmodeNet& net,
                                          const TrainConfig& cfg);

inline constexpr int kIgnore = -2;
inline constexpr int kNegative = -1;

/// Per anchor: ground-truth index, kNegative or kIgnore. Every ground truth gets at
/// least its best-overlapping anchor.
std::vector<int> match_anchors(const std::vector<net::Anchor>& anchors, const std::vector<Box>& gt,
                               double positive_iou, double negative_iou);

/// Forward, losses and backward for one input_size frame. Parameter gradients are
/// accumulated scaled by `grad_scale`.
losses::LossReport train_image(net::PmodeNet& net, const AnnotatedFrame& frame,
                               const std::vector<InstanceTarget>& targets, const TrainConfig& cfg,
                               double grad_scale = 1.0);

/// Right-most box among detections scoring at least half of the best. -1 when empty.
int select_primary(const std::vector<net::Detection>& dets);

// ---- evaluation ----

struct EvalInstance {
  Box box;       // any consistent coordinate frame
  cv::Mat mask;  // CV_8U 0/1, used for segm
  double score = 1.0;
};

enum class MapKind { BBox, Segm };

struct MapResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool flagged = true;  // set when there is no ground truth
  std::vector<double> per_threshold;
};

double mask_iou(const cv::Mat& a, const cv::Mat& b);

/// 101-point interpolated AP for one IoU threshold. Detections and ground truth are
/// grouped per image.
double average_precision(const std::vector<std::vector<EvalInstance>>& dets,
                         const std::vector<std::vector<EvalInstance>>& gts, double iou_threshold, MapKind kind);

/// AP averaged over IoU thresholds 0.50:0.05:0.95.
MapResult evaluate_map(const std::vector<std::vector<EvalInstance>>& dets,
                       const std::vector<std::vector<EvalInstance>>& gts, MapKind kind);

struct MapeResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
  bool flagged = false;  // some labels were excluded
};

MapeResult evaluate_mape(const std::vector<net::DimensionEstimate>& estimates,
                         const std::vector<DimensionLabel>& labels);

struct MetricReport {
  double bbox_map = 0.0;
  double segm_map = 0.0;
  double hnw_mape = 0.0;
  double hnw_l1 = 0.0;
  std::size_t images = 0;
  std::size_t instances = 0;
  bool flagged = false;
};

nlohmann::ordered_json metric_report_to_json(const MetricReport& r);

/// Runs the full inference pipeline on each frame (resized to the network input)
/// and scores it. A ground truth without a primary detection counts as a (0, 0)
/// estimate for MAPE.
MetricReport evaluate(const net::PmodeNet& net, const std::vector<AnnotatedFrame>& frames);

// ---- training ----

struct EpochRecord {
  int epoch = 0;
  losses::LossReport train_loss;  // mean over steps
  std::optional<MetricReport> val;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<losses::LossReport> steps;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  double best_mape = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  bool diverged = false;
  std::string message;
  std::shared_ptr<net::PmodeNet> best_model;   // weights of the best validation epoch
  std::shared_ptr<net::PmodeNet> final_model;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Trains on `frames`, validating on the held-out tracks. Writes `loss_log.csv`,
/// `metrics.csv`, `best.ckpt` and `last.ckpt` into cfg.output_dir when it is set.
TrainResult train(const TrainConfig& cfg, const std::vector<AnnotatedFrame>& frames, ProgressFn progress = {});
/// Loads the dataset named in the config.
TrainResult train(const TrainConfig& cfg, ProgressFn progress = {});

struct AblationRow {
  std::string name;
  MetricReport metrics;
  bool failed = false;
  std::string error;
};

/// Trains and evaluates each named config on the same frames, writing a CSV with
/// columns name,bbox_map,segm_map,hnw_mape when `csv` is non-empty.
std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, TrainConfig>>& configs,
                                      const std::vector<AnnotatedFrame>& frames,
                                      const std::filesystem::path& csv = {});

}  // namespace pmode::train
