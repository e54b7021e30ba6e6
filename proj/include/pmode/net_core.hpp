#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pmode/augment.hpp"
#include "pmode/common.hpp"
#include "pmode/nn.hpp"
#include "json.hpp"

namespace pmode::net {

struct NetworkConfig {
  int input_size = 128;
  int k_prototypes = 32;
  std::string backbone_preset = "tiny";  // "tiny" or "resnet50-like"
  double backbone_width = 1.0;           // channel multiplier for the resnet50-like preset
  int fpn_channels = 32;
  int mlp_mask_size = 30;                // 30 or 150
  int mlp_layers = 6;
  std::vector<int> mlp_hidden = {512, 256, 128, 64, 16};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};
  std::vector<double> anchor_sizes = {20.0, 44.0, 96.0};  // per level, pixels at a 128 input
  double nms_iou_threshold = 0.5;
  double score_threshold = 0.05;
  int pre_nms_top_n = 200;
  int max_detections = 100;
  augment::DepthMode depth_mode = augment::DepthMode::None;

  void validate() const;
  int anchors_per_cell() const { return static_cast<int>(anchor_ratios.size()); }
  int mlp_input_length() const;
  std::vector<int> mlp_widths() const;
};

nlohmann::ordered_json config_to_json(const NetworkConfig& cfg);
NetworkConfig config_from_json(const nlohmann::json& j);

/// Anchor in input pixels.
struct Anchor {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  Box box() const { return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}; }
};

/// Level-major, then row, column, ratio.
std::vector<Anchor> make_anchors(const NetworkConfig& cfg, const std::vector<cv::Size>& level_sizes);

/// SSD-style box coding with variances (0.1, 0.2).
std::array<double, 4> encode_box(const Box& gt, const Anchor& anchor);
Box decode_box(const std::array<double, 4>& delta, const Anchor& anchor);

struct Pyramid {
  std::vector<nn::Tensor> levels;  // P3, P4, P5
  cv::Size proto_size;             // quarter-resolution grid of the protonet
};

using PrototypeStack = nn::Tensor;  // k x Hp x Wp

struct DetectionCandidate {
  double class_score = 0.0;
  Box box;  // normalized to [0, 1]
  std::vector<float> mask_coeffs;
  int anchor_index = -1;
};

struct DimensionEstimate {
  double width_m = 0.0;
  double height_m = 0.0;
  int detection_ref = -1;
};

/// Raw per-anchor outputs of a forward pass.
struct NetOutput {
  Pyramid pyramid;
  PrototypeStack protos;
  std::vector<float> cls_logits;  // A x 2 (background, board)
  std::vector<float> box_deltas;  // A x 4
  std::vector<float> coeffs;      // A x k, after tanh
};

/// Upstream gradients for NetOutput fields. Empty vectors mean zero.
struct NetGrad {
  nn::Tensor dprotos;
  std::vector<float> dcls;
  std::vector<float> dbox;
  std::vector<float> dcoeffs;
};

struct ConvStep {
  nn::ConvCache conv;
  nn::Tensor out;
};

struct BlockCache {
  std::vector<ConvStep> steps;
  ConvStep proj;
  nn::Tensor input;
  nn::Tensor out;
};

struct ForwardCache {
  ConvStep stem;
  std::vector<BlockCache> blocks;
  std::vector<int> stage_end;  // index of the last block of each stage
  std::vector<ConvStep> lateral;
  std::vector<ConvStep> smooth;
  std::vector<ConvStep> proto;
  std::vector<ConvStep> head_shared;
  std::vector<ConvStep> head_cls, head_box, head_coef;
};

class PmodeNet {
 public:
  explicit PmodeNet(NetworkConfig cfg, std::uint64_t seed = 0);

  const NetworkConfig& config() const { return cfg_; }
  const std::vector<Anchor>& anchors() const { return anchors_; }
  int num_anchors() const { return static_cast<int>(anchors_.size()); }
  const std::vector<cv::Size>& level_sizes() const { return level_sizes_; }
  cv::Size proto_size() const { return proto_size_; }

  Pyramid pyramid(const nn::Tensor& image, ForwardCache* cache = nullptr) const;
  PrototypeStack protonet(const Pyramid& pyramid, ForwardCache* cache = nullptr) const;
  void heads(const Pyramid& pyramid, NetOutput& out, ForwardCache* cache = nullptr) const;
  NetOutput forward(const nn::Tensor& image, ForwardCache* cache = nullptr) const;
  /// Accumulates parameter gradients for the convolutional part.
  void backward(const NetGrad& grad, const ForwardCache& cache);

  std::vector<nn::Parameter*> parameters();
  std::vector<nn::Parameter*> backbone_parameters();
  std::vector<nn::Parameter*> protonet_parameters();
  std::vector<nn::Parameter*> head_parameters();
  std::vector<nn::Parameter*> mlp_parameters();
  void zero_grad();

  nn::Mlp<float> mlp;

 private:
  struct Block {
    bool bottleneck = false;
    std::vector<nn::Conv2d> convs;
    std::optional<nn::Conv2d> proj;
  };

  nn::Tensor block_forward(const Block& b, const nn::Tensor& x, BlockCache* cache) const;
  nn::Tensor block_backward(Block& b, const nn::Tensor& dy, const BlockCache& cache);

  NetworkConfig cfg_;
  nn::Conv2d stem_;
  std::vector<Block> blocks_;
  std::vector<int> stage_end_;
  std::vector<int> stage_channels_;
  std::vector<nn::Conv2d> lateral_, smooth_;
  std::vector<nn::Conv2d> proto_;
  nn::Conv2d head_shared_, head_cls_, head_box_, head_coef_;
  std::vector<cv::Size> level_sizes_;
  std::vector<cv::Size> stage_sizes_;
  cv::Size proto_size_;
  std::vector<Anchor> anchors_;
};

/// 8-bit BGR image of input_size x input_size to a normalized tensor.
nn::Tensor image_to_tensor(const cv::Mat& image, int input_size);

Pyramid extract_pyramid_features(const PmodeNet& net, const cv::Mat& image);
PrototypeStack protonet_forward(const PmodeNet& net, const Pyramid& pyramid);
/// One candidate per anchor, before NMS.
std::vector<DetectionCandidate> prediction_heads_forward(const PmodeNet& net, const Pyramid& pyramid);
std::vector<DetectionCandidate> decode_candidates(const PmodeNet& net, const NetOutput& out);

/// sigmoid(sum_i coeffs_i * proto_i) on the prototype grid, CV_32FC1.
cv::Mat assemble_instance_mask(const PrototypeStack& protos, const std::vector<float>& coeffs);
/// Zeroes everything outside `box` (normalized coordinates).
cv::Mat crop_mask(const cv::Mat& mask, const Box& box);

/// Fast NMS: sorts by score, keeps the top `top_n`, and drops every candidate whose IoU
/// with any higher-scoring candidate (kept or not) exceeds the threshold.
std::vector<DetectionCandidate> fast_nms(std::vector<DetectionCandidate> candidates, double iou_threshold,
                                         int top_n);

/// Builds the dimension-head input from a cropped prototype-grid mask: optional depth
/// integration, resize to mlp_mask_size, then flattened mask followed by coefficients.
std::vector<float> dimension_input(const NetworkConfig& cfg, const cv::Mat& cropped_mask,
                                   const std::vector<float>& coeffs, const cv::Mat& depth = {});

/// `mask` is mlp_mask_size x mlp_mask_size with one channel (two for concat depth).
/// Outputs are clamped to be non-negative.
DimensionEstimate dimension_head_forward(const PmodeNet& net, const cv::Mat& mask, const std::vector<float>& coeffs);
/// Raw (height, width) head outputs, unclamped.
std::array<double, 2> dimension_head_raw(const PmodeNet& net, const std::vector<float>& input);

struct Detection {
  DetectionCandidate candidate;
  cv::Mat mask;  // probabilities on the prototype grid, cropped to the box
  DimensionEstimate dims;
};

/// Full pipeline on one input_size x input_size frame. `depth` (CV_32FC1, any size) is
/// used when the config enables depth integration.
std::vector<Detection> infer_frame(const PmodeNet& net, const cv::Mat& image, const cv::Mat& depth = {});

/// Detection mask resampled to `size` and binarized at 0.5, CV_8UC1 (0/1).
cv::Mat binary_mask(const Detection& det, cv::Size size);

/// Checkpoint: 8-byte magic, u64 header length, JSON header (version "pmode-v1",
/// config, tensor index, extra), then little-endian float32 tensors.
void save_checkpoint(PmodeNet& net, const std::filesystem::path& path, const nlohmann::json& extra = {});
PmodeNet load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

inline constexpr const char* kCheckpointVersion = "pmode-v1";

}  // namespace pmode::net
