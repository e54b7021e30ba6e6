#include "pmode/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <opencv2/imgproc.hpp>

namespace pmode::train {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* where) {
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw SchemaError(std::string(where) + ": unknown key '" + k + "'");
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + exp(x)) without overflow
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

bool finite(const losses::LossReport& r) {
  return std::isfinite(r.l_seg) && std::isfinite(r.l_corner) && std::isfinite(r.l_hnw) && std::isfinite(r.l_bbox) &&
         std::isfinite(r.l_cls) && std::isfinite(r.l_total);
}

// Cells of a rows x cols grid overlapping `box` given in grid units.
bool cell_in(const Box& b, int i, int j) { return i + 1 > b.y1 && i < b.y2 && j + 1 > b.x1 && j < b.x2; }

Box scale_box(const Box& b, double sx, double sy) { return {b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy}; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

// ---- configuration ----

void TrainConfig::validate(bool check_paths) const {
  if (epochs < 1) throw SchemaError("epochs must be >= 1");
  if (batch_size < 1) throw SchemaError("batch_size must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw SchemaError("learning_rate must be positive");
  if (optimizer.kind != "sgd" && optimizer.kind != "adam") throw SchemaError("optimizer must be 'sgd' or 'adam'");
  if (schedule != "cosine" && schedule != "constant") throw SchemaError("schedule must be 'cosine' or 'constant'");
  if (eval_interval < 1) throw SchemaError("eval_interval must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw SchemaError("val_fraction must be in [0, 1)");
  if (!(negative_iou <= positive_iou)) throw SchemaError("negative_iou must not exceed positive_iou");
  if (negatives_per_positive < 1 || max_mask_positives < 1) throw SchemaError("matching counts must be >= 1");
  network.validate();
  augment.validate();
  if (check_paths && !std::filesystem::exists(dataset)) {
    throw PreconditionError("dataset not found: " + dataset.string());
  }
}

ojson augment_config_to_json(const augment::AugmentConfig& c) {
  ojson j;
  j["brightness_contrast"] = c.brightness_contrast;
  j["brightness_limit"] = c.brightness_limit;
  j["contrast_limit"] = c.contrast_limit;
  j["rgb_shift"] = c.rgb_shift;
  j["rgb_shift_limit"] = c.rgb_shift_limit;
  j["hue_saturation_value"] = c.hue_saturation_value;
  j["hue_shift_limit"] = c.hue_shift_limit;
  j["sat_shift_limit"] = c.sat_shift_limit;
  j["val_shift_limit"] = c.val_shift_limit;
  j["jpeg_compression"] = c.jpeg_compression;
  j["jpeg_quality_min"] = c.jpeg_quality_min;
  j["jpeg_quality_max"] = c.jpeg_quality_max;
  j["channel_shuffle"] = c.channel_shuffle;
  j["median_blur"] = c.median_blur;
  j["median_blur_ksize"] = c.median_blur_ksize;
  j["transform_probability"] = c.transform_probability;
  j["horizontal_flip"] = c.horizontal_flip;
  j["vertical_flip"] = c.vertical_flip;
  j["rotate"] = c.rotate;
  j["max_rotation_deg"] = c.max_rotation_deg;
  j["rot90_probability"] = c.rot90_probability;
  j["mask_extension_max_px"] = c.mask_extension_max_px;
  j["mask_extension_probability"] = c.mask_extension_probability;
  j["seed"] = c.seed;
  return j;
}

augment::AugmentConfig augment_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("augment: expected an object");
  const auto defaults = augment_config_to_json({});
  std::set<std::string> known;
  for (const auto& [k, v] : defaults.items()) known.insert(k);
  reject_unknown(j, known, "augment");
  augment::AugmentConfig c;
  try {
    read(j, "brightness_contrast", c.brightness_contrast);
    read(j, "brightness_limit", c.brightness_limit);
    read(j, "contrast_limit", c.contrast_limit);
    read(j, "rgb_shift", c.rgb_shift);
    read(j, "rgb_shift_limit", c.rgb_shift_limit);
    read(j, "hue_saturation_value", c.hue_saturation_value);
    read(j, "hue_shift_limit", c.hue_shift_limit);
    read(j, "sat_shift_limit", c.sat_shift_limit);
    read(j, "val_shift_limit", c.val_shift_limit);
    read(j, "jpeg_compression", c.jpeg_compression);
    read(j, "jpeg_quality_min", c.jpeg_quality_min);
    read(j, "jpeg_quality_max", c.jpeg_quality_max);
    read(j, "channel_shuffle", c.channel_shuffle);
    read(j, "median_blur", c.median_blur);
    read(j, "median_blur_ksize", c.median_blur_ksize);
    read(j, "transform_probability", c.transform_probability);
    read(j, "horizontal_flip", c.horizontal_flip);
    read(j, "vertical_flip", c.vertical_flip);
    read(j, "rotate", c.rotate);
    read(j, "max_rotation_deg", c.max_rotation_deg);
    read(j, "rot90_probability", c.rot90_probability);
    read(j, "mask_extension_max_px", c.mask_extension_max_px);
    read(j, "mask_extension_probability", c.mask_extension_probability);
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("augment: ") + e.what());
  }
  return c;
}

namespace {

ojson optimizer_to_json(const nn::OptimizerConfig& o) {
  ojson j;
  j["kind"] = o.kind;
  j["learning_rate"] = o.learning_rate;
  j["momentum"] = o.momentum;
  j["weight_decay"] = o.weight_decay;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["epsilon"] = o.epsilon;
  j["clip_norm"] = o.clip_norm;
  return j;
}

ojson corner_to_json(const losses::CornerParams& c) {
  ojson j;
  j["harris_k"] = c.harris_k;
  j["harris_block_size"] = c.harris_block_size;
  j["blur_sigma"] = c.blur_sigma;
  j["harris_aperture"] = c.harris_aperture;
  j["response_fraction"] = c.response_fraction;
  j["dbscan_eps"] = c.dbscan_eps;
  j["dbscan_min_samples"] = c.dbscan_min_samples;
  j["radius_px"] = c.radius_px;
  j["reference_size"] = c.reference_size;
  j["canny_low"] = c.canny_low;
  j["canny_high"] = c.canny_high;
  return j;
}

}  // namespace

ojson train_config_to_json(const TrainConfig& c) {
  ojson j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = optimizer_to_json(c.optimizer);
  j["schedule"] = c.schedule;
  j["seed"] = c.seed;
  j["network"] = net::config_to_json(c.network);
  j["augment"] = augment_config_to_json(c.augment);
  j["corner_loss_enabled"] = c.corner_loss_enabled;
  j["corner"] = corner_to_json(c.corner);
  j["depth_mode"] = augment::to_string(c.network.depth_mode);
  j["dataset"] = c.dataset.string();
  j["output_dir"] = c.output_dir.string();
  j["eval_interval"] = c.eval_interval;
  j["val_fraction"] = c.val_fraction;
  j["positive_iou"] = c.positive_iou;
  j["negative_iou"] = c.negative_iou;
  j["negatives_per_positive"] = c.negatives_per_positive;
  j["max_mask_positives"] = c.max_mask_positives;
  j["deterministic"] = c.deterministic;
  return j;
}

TrainConfig train_config_from_json(const json& j, const std::filesystem::path& base) {
  if (!j.is_object()) throw SchemaError("train config: expected an object");
  reject_unknown(j,
                 {"epochs", "batch_size", "optimizer", "schedule", "seed", "network", "augment",
                  "corner_loss_enabled", "corner", "depth_mode", "dataset", "output_dir", "eval_interval",
                  "val_fraction", "positive_iou", "negative_iou", "negatives_per_positive", "max_mask_positives",
                  "deterministic"},
                 "train config");
  TrainConfig c;
  try {
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      reject_unknown(o, {"kind", "learning_rate", "momentum", "weight_decay", "beta1", "beta2", "epsilon", "clip_norm"},
                     "optimizer");
      read(o, "kind", c.optimizer.kind);
      read(o, "learning_rate", c.optimizer.learning_rate);
      read(o, "momentum", c.optimizer.momentum);
      read(o, "weight_decay", c.optimizer.weight_decay);
      read(o, "beta1", c.optimizer.beta1);
      read(o, "beta2", c.optimizer.beta2);
      read(o, "epsilon", c.optimizer.epsilon);
      read(o, "clip_norm", c.optimizer.clip_norm);
    }
    read(j, "schedule", c.schedule);
    read(j, "seed", c.seed);
    if (j.contains("network")) c.network = net::config_from_json(j.at("network"));
    if (j.contains("augment")) c.augment = augment_config_from_json(j.at("augment"));
    read(j, "corner_loss_enabled", c.corner_loss_enabled);
    if (j.contains("corner")) {
      const auto& o = j.at("corner");
      const auto defaults = corner_to_json({});
      std::set<std::string> known;
      for (const auto& [k, v] : defaults.items()) known.insert(k);
      reject_unknown(o, known, "corner");
      read(o, "harris_k", c.corner.harris_k);
      read(o, "harris_block_size", c.corner.harris_block_size);
      read(o, "blur_sigma", c.corner.blur_sigma);
      read(o, "harris_aperture", c.corner.harris_aperture);
      read(o, "response_fraction", c.corner.response_fraction);
      read(o, "dbscan_eps", c.corner.dbscan_eps);
      read(o, "dbscan_min_samples", c.corner.dbscan_min_samples);
      read(o, "radius_px", c.corner.radius_px);
      read(o, "reference_size", c.corner.reference_size);
      read(o, "canny_low", c.corner.canny_low);
      read(o, "canny_high", c.corner.canny_high);
    }
    if (j.contains("depth_mode")) c.network.depth_mode = augment::depth_mode_from_string(j.at("depth_mode").get<std::string>());
    std::string p;
    if (j.contains("dataset")) {
      read(j, "dataset", p);
      c.dataset = p.empty() || std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p;
    }
    if (j.contains("output_dir")) {
      p.clear();
      read(j, "output_dir", p);
      c.output_dir = p.empty() || std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p;
    }
    read(j, "eval_interval", c.eval_interval);
    read(j, "val_fraction", c.val_fraction);
    read(j, "positive_iou", c.positive_iou);
    read(j, "negative_iou", c.negative_iou);
    read(j, "negatives_per_positive", c.negatives_per_positive);
    read(j, "max_mask_positives", c.max_mask_positives);
    read(j, "deterministic", c.deterministic);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j, path.parent_path());
}

// ---- data ----

TrackSplit split_by_track(const std::vector<AnnotatedFrame>& frames, double val_fraction, std::uint64_t seed) {
  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::int64_t key = frames[i].track_id ? *frames[i].track_id : -1 - static_cast<std::int64_t>(i);
    groups[key].push_back(i);
  }
  std::vector<std::int64_t> keys;
  for (const auto& [k, v] : groups) keys.push_back(k);
  std::mt19937_64 rng(mix_seed(seed, 0x5b11u));
  std::shuffle(keys.begin(), keys.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(keys.size())));
  if (val_fraction > 0.0 && n_val == 0 && keys.size() >= 2) n_val = 1;
  TrackSplit split;
  for (std::size_t g = 0; g < keys.size(); ++g) {
    auto& dst = g < n_val ? split.val : split.train;
    const auto& members = groups[keys[g]];
    dst.insert(dst.end(), members.begin(), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::vector<InstanceTarget> build_targets(const AnnotatedFrame& frame, const net::PmodeNet& net,
                                          const TrainConfig& cfg) {
  const int S = net.config().input_size;
  if (frame.width() != S || frame.height() != S) throw ShapeError("build_targets: frame must be input sized");
  const cv::Size proto = net.proto_size();
  std::vector<InstanceTarget> out;
  for (std::size_t i = 0; i < frame.polygons.size(); ++i) {
    InstanceTarget t;
    t.mask = rasterize_polygon(frame.polygons[i], S, S);
    if (cv::countNonZero(t.mask) == 0) continue;
    const Box b = bounding_box(frame.polygons[i]);
    t.box = {std::clamp(b.x1, 0.0, double(S)), std::clamp(b.y1, 0.0, double(S)), std::clamp(b.x2, 0.0, double(S)),
             std::clamp(b.y2, 0.0, double(S))};
    cv::Mat f;
    t.mask.convertTo(f, CV_32F);
    cv::resize(f, t.proto_mask, proto, 0, 0, cv::INTER_AREA);
    t.label = i < frame.labels.size() ? frame.labels[i] : DimensionLabel{};
    if (cfg.corner_loss_enabled) {
      t.clusters = losses::detect_corner_clusters(t.mask, cfg.corner, static_cast<int>(i));
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<int> match_anchors(const std::vector<net::Anchor>& anchors, const std::vector<Box>& gt,
                               double positive_iou, double negative_iou) {
  std::vector<int> match(anchors.size(), kNegative);
  if (gt.empty()) return match;
  std::vector<double> best_for_gt(gt.size(), -1.0);
  std::vector<std::size_t> best_anchor(gt.size(), 0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const Box ab = anchors[a].box();
    double best = -1.0;
    int idx = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = box_iou(ab, gt[g]);
      if (iou > best) {
        best = iou;
        idx = static_cast<int>(g);
      }
      if (iou > best_for_gt[g]) {
        best_for_gt[g] = iou;
        best_anchor[g] = a;
      }
    }
    if (best >= positive_iou) {
      match[a] = idx;
    } else if (best >= negative_iou) {
      match[a] = kIgnore;
    }
  }
  for (std::size_t g = 0; g < gt.size(); ++g) match[best_anchor[g]] = static_cast<int>(g);
  return match;
}

// ---- one training image ----

losses::LossReport train_image(net::PmodeNet& net, const AnnotatedFrame& frame,
                               const std::vector<InstanceTarget>& targets, const TrainConfig& cfg,
                               double grad_scale) {
  const auto& ncfg = net.config();
  const int S = ncfg.input_size;
  const int K = ncfg.k_prototypes;
  const int A = net.num_anchors();
  const auto& anchors = net.anchors();

  net::ForwardCache cache;
  const net::NetOutput out = net.forward(net::image_to_tensor(frame.image, S), &cache);
  const int Hp = out.protos.h, Wp = out.protos.w, P = Hp * Wp;

  std::vector<Box> gt_boxes;
  for (const auto& t : targets) gt_boxes.push_back(t.box);
  const auto match = match_anchors(anchors, gt_boxes, cfg.positive_iou, cfg.negative_iou);

  net::NetGrad g;
  g.dcls.assign(std::size_t(A) * 2, 0.0f);
  g.dbox.assign(std::size_t(A) * 4, 0.0f);
  g.dcoeffs.assign(std::size_t(A) * K, 0.0f);
  g.dprotos = nn::Tensor(K, Hp, Wp);

  std::vector<int> pos, neg;
  for (int a = 0; a < A; ++a) {
    if (match[a] >= 0) pos.push_back(a);
    else if (match[a] == kNegative) neg.push_back(a);
  }

  // Classification with 3:1 hard negative mining.
  double l_cls = 0.0;
  {
    std::vector<double> bg_loss(A);
    for (int a : neg) bg_loss[a] = softplus(out.cls_logits[a * 2 + 1] - out.cls_logits[a * 2]);
    const std::size_t n_neg =
        std::min(neg.size(), std::size_t(cfg.negatives_per_positive) * std::max<std::size_t>(1, pos.size()));
    std::stable_sort(neg.begin(), neg.end(), [&](int x, int y) { return bg_loss[x] > bg_loss[y]; });
    neg.resize(n_neg);
    std::vector<double> probs;
    std::vector<int> cls;
    std::vector<int> rows;
    for (int a : pos) {
      rows.push_back(a);
      cls.push_back(1);
    }
    for (int a : neg) {
      rows.push_back(a);
      cls.push_back(0);
    }
    for (int a : rows) {
      const double p1 = sigmoid(double(out.cls_logits[a * 2 + 1]) - out.cls_logits[a * 2]);
      probs.push_back(1.0 - p1);
      probs.push_back(p1);
    }
    const auto v = losses::classification_loss(probs, 2, cls);
    // Exact log-softmax value; the clamped probability form only differs at saturation.
    if (!rows.empty()) {
      double sum = 0.0;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const double d = double(out.cls_logits[rows[r] * 2 + 1]) - out.cls_logits[rows[r] * 2];
        sum += cls[r] == 1 ? softplus(-d) : softplus(d);
      }
      l_cls = sum / rows.size();
    } else {
      l_cls = v.value;
    }
    const double inv = grad_scale / std::max<std::size_t>(1, rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const int a = rows[r];
      const double p1 = probs[r * 2 + 1];
      const double d1 = (p1 - (cls[r] == 1 ? 1.0 : 0.0)) * inv;
      g.dcls[a * 2 + 1] = static_cast<float>(d1);
      g.dcls[a * 2] = static_cast<float>(-d1);
    }
  }

  // Box regression: smooth-L1 summed over the 4 deltas, averaged over positives.
  double l_bbox = 0.0;
  if (!pos.empty()) {
    std::vector<double> pred, tgt, grad;
    for (int a : pos) {
      const auto d = net::encode_box(targets[match[a]].box, anchors[a]);
      for (int c = 0; c < 4; ++c) {
        pred.push_back(out.box_deltas[a * 4 + c]);
        tgt.push_back(d[c]);
      }
    }
    l_bbox = 4.0 * losses::smooth_l1(pred, tgt, &grad);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      for (int c = 0; c < 4; ++c) g.dbox[pos[i] * 4 + c] = static_cast<float>(4.0 * grad[i * 4 + c] * grad_scale);
    }
  }

  // Positives per instance, best overlap first.
  std::vector<std::vector<int>> inst_pos(targets.size());
  for (int a : pos) inst_pos[match[a]].push_back(a);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& v = inst_pos[t];
    std::stable_sort(v.begin(), v.end(), [&](int x, int y) {
      return box_iou(anchors[x].box(), targets[t].box) > box_iou(anchors[y].box(), targets[t].box);
    });
    if (static_cast<int>(v.size()) > cfg.max_mask_positives) v.resize(cfg.max_mask_positives);
  }

  auto assemble_logits = [&](int a) {
    std::vector<double> z(P, 0.0);
    for (int k = 0; k < K; ++k) {
      const double c = out.coeffs[std::size_t(a) * K + k];
      const float* pk = out.protos.channel(k);
      for (int i = 0; i < P; ++i) z[i] += c * pk[i];
    }
    return z;
  };
  // Routes dz (per proto pixel) into prototype and coefficient gradients.
  auto push_mask_grad = [&](int a, const std::vector<double>& dz) {
    for (int k = 0; k < K; ++k) {
      const float c = out.coeffs[std::size_t(a) * K + k];
      const float* pk = out.protos.channel(k);
      float* dpk = g.dprotos.channel(k);
      double dc = 0.0;
      for (int i = 0; i < P; ++i) {
        if (dz[i] == 0.0) continue;
        dpk[i] += static_cast<float>(dz[i] * c);
        dc += dz[i] * pk[i];
      }
      g.dcoeffs[std::size_t(a) * K + k] += static_cast<float>(dc);
    }
  };

  // Segmentation: BCE inside the ground-truth box on the prototype grid.
  double l_seg = 0.0;
  {
    std::size_t pairs = 0;
    for (const auto& v : inst_pos) pairs += v.size();
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const Box gb = scale_box(targets[t].box, double(Wp) / S, double(Hp) / S);
      for (int a : inst_pos[t]) {
        const auto z = assemble_logits(a);
        std::vector<double> p, y;
        std::vector<int> idx;
        for (int i = 0; i < Hp; ++i) {
          for (int j = 0; j < Wp; ++j) {
            if (!cell_in(gb, i, j)) continue;
            idx.push_back(i * Wp + j);
            p.push_back(sigmoid(z[i * Wp + j]));
            y.push_back(targets[t].proto_mask.at<float>(i, j));
          }
        }
        if (idx.empty()) continue;
        l_seg += losses::bce_segmentation_loss(p, y) / pairs;
        std::vector<double> dz(P, 0.0);
        const double s = grad_scale / (double(pairs) * idx.size());
        for (std::size_t n = 0; n < idx.size(); ++n) dz[idx[n]] = (p[n] - y[n]) * s;
        push_mask_grad(a, dz);
      }
    }
  }

  // Corner alignment on the best positive of each instance, at input resolution.
  double l_corner = 0.0;
  if (cfg.corner_loss_enabled) {
    std::vector<std::size_t> active;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (!inst_pos[t].empty() && !targets[t].clusters.centroids.empty()) active.push_back(t);
    }
    const nn::Bilinear up(Hp, Wp, S, S);
    for (std::size_t t : active) {
      const int a = inst_pos[t].front();
      const auto z = assemble_logits(a);
      std::vector<float> p32(P), p_in(std::size_t(S) * S);
      for (int i = 0; i < P; ++i) p32[i] = static_cast<float>(sigmoid(z[i]));
      up.forward_plane(p32.data(), p_in.data());
      cv::Mat pred(S, S, CV_32F, cv::Scalar(0.0f));
      const Box& gb = targets[t].box;
      for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
          if (cell_in(gb, i, j)) pred.at<float>(i, j) = p_in[std::size_t(i) * S + j];
        }
      }
      cv::Mat grad;
      const auto v = losses::corner_alignment_loss(pred, targets[t].mask, targets[t].clusters, cfg.corner, &grad);
      l_corner += v.value / active.size();
      std::vector<float> dp_in(std::size_t(S) * S, 0.0f), dp32(P, 0.0f);
      for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
          if (cell_in(gb, i, j)) dp_in[std::size_t(i) * S + j] = static_cast<float>(grad.at<double>(i, j));
        }
      }
      up.backward_plane(dp_in.data(), dp32.data());
      std::vector<double> dz(P);
      const double s = grad_scale / active.size();
      for (int i = 0; i < P; ++i) dz[i] = dp32[i] * double(p32[i]) * (1.0 - p32[i]) * s;
      push_mask_grad(a, dz);
    }
  }

  // Dimension head on the detached mask and coefficients of the best positive.
  double l_hnw = 0.0;
  {
    std::size_t n = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) n += !inst_pos[t].empty() && targets[t].label.valid();
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (inst_pos[t].empty() || !targets[t].label.valid()) continue;
      const int a = inst_pos[t].front();
      const std::vector<float> coeffs(out.coeffs.begin() + std::size_t(a) * K,
                                      out.coeffs.begin() + std::size_t(a + 1) * K);
      const cv::Mat mask = net::crop_mask(net::assemble_instance_mask(out.protos, coeffs),
                                          scale_box(targets[t].box, 1.0 / S, 1.0 / S));
      const auto input = net::dimension_input(ncfg, mask, coeffs, frame.depth);
      nn::Mlp<float>::Cache mc;
      const Eigen::Map<const Eigen::VectorXf> x(input.data(), static_cast<Eigen::Index>(input.size()));
      const Eigen::VectorXf y = net.mlp.forward(x, &mc);
      std::array<double, 2> gy{};
      l_hnw += losses::hnw_loss({y[0], y[1]}, targets[t].label, &gy) / n;
      Eigen::VectorXf dy(2);
      dy << static_cast<float>(gy[0] * grad_scale / n), static_cast<float>(gy[1] * grad_scale / n);
      net.mlp.backward(dy, mc);
    }
  }

  net.backward(g, cache);
  return losses::total_loss(l_seg, l_corner, l_hnw, l_bbox, l_cls, cfg.corner_loss_enabled);
}

int select_primary(const std::vector<net::Detection>& dets) {
  if (dets.empty()) return -1;
  double best = 0.0;
  for (const auto& d : dets) best = std::max(best, d.candidate.class_score);
  int pick = -1;
  double pick_x = -1.0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& c = dets[i].candidate;
    if (c.class_score < 0.5 * best) continue;
    const double cx = 0.5 * (c.box.x1 + c.box.x2);
    if (cx > pick_x) {
      pick_x = cx;
      pick = static_cast<int>(i);
    }
  }
  return pick;
}

// ---- evaluation ----

double mask_iou(const cv::Mat& a, const cv::Mat& b) {
  if (a.size() != b.size()) throw ShapeError("mask_iou: size mismatch");
  const int inter = cv::countNonZero((a != 0) & (b != 0));
  const int uni = cv::countNonZero((a != 0) | (b != 0));
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

double average_precision(const std::vector<std::vector<EvalInstance>>& dets,
                         const std::vector<std::vector<EvalInstance>>& gts, double iou_threshold, MapKind kind) {
  if (dets.size() != gts.size()) throw ShapeError("average_precision: image count mismatch");
  std::size_t n_gt = 0;
  for (const auto& g : gts) n_gt += g.size();
  if (n_gt == 0) return std::numeric_limits<double>::quiet_NaN();

  struct Ref {
    std::size_t img, idx;
    double score;
  };
  std::vector<Ref> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t k = 0; k < dets[i].size(); ++k) order.push_back({i, k, dets[i][k].score});
  }
  std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : order) {
    const auto& d = dets[r.img][r.idx];
    double best = iou_threshold;
    int hit = -1;
    for (std::size_t gi = 0; gi < gts[r.img].size(); ++gi) {
      if (used[r.img][gi]) continue;
      const auto& gt = gts[r.img][gi];
      const double iou = kind == MapKind::BBox ? box_iou(d.box, gt.box) : mask_iou(d.mask, gt.mask);
      if (iou >= best) {
        best = iou;
        hit = static_cast<int>(gi);
      }
    }
    if (hit >= 0) {
      used[r.img][hit] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

MapResult evaluate_map(const std::vector<std::vector<EvalInstance>>& dets,
                       const std::vector<std::vector<EvalInstance>>& gts, MapKind kind) {
  MapResult r;
  std::size_t n_gt = 0;
  for (const auto& g : gts) n_gt += g.size();
  if (n_gt == 0) return r;
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double ap = average_precision(dets, gts, 0.5 + 0.05 * i, kind);
    r.per_threshold.push_back(ap);
    sum += ap;
  }
  r.value = sum / 10.0;
  r.flagged = false;
  return r;
}

MapeResult evaluate_mape(const std::vector<net::DimensionEstimate>& estimates,
                         const std::vector<DimensionLabel>& labels) {
  if (estimates.size() != labels.size()) throw ShapeError("evaluate_mape: list lengths differ");
  MapeResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& l = labels[i];
    if (!(l.width_m > 0.0) || !(l.height_m > 0.0)) {
      r.flagged = true;
      continue;
    }
    sum += 0.5 * (std::abs(estimates[i].width_m - l.width_m) / l.width_m +
                  std::abs(estimates[i].height_m - l.height_m) / l.height_m);
    ++r.count;
  }
  if (r.count > 0) r.value = sum / r.count;
  return r;
}

ojson metric_report_to_json(const MetricReport& r) {
  ojson j;
  auto num = [](double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); };
  j["bbox_map"] = num(r.bbox_map);
  j["segm_map"] = num(r.segm_map);
  j["hnw_mape"] = num(r.hnw_mape);
  j["hnw_l1"] = num(r.hnw_l1);
  j["images"] = r.images;
  j["instances"] = r.instances;
  j["flagged"] = r.flagged;
  return j;
}

MetricReport evaluate(const net::PmodeNet& net, const std::vector<AnnotatedFrame>& frames) {
  const int S = net.config().input_size;
  const cv::Size size(S, S);
  std::vector<std::vector<EvalInstance>> dets(frames.size()), gts(frames.size());
  std::vector<net::DimensionEstimate> estimates;
  std::vector<DimensionLabel> labels;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const AnnotatedFrame fr = frames[f].image.size() == size ? frames[f] : resize_frame(frames[f], size);
    const auto found = net::infer_frame(net, fr.image, fr.depth);
    for (const auto& d : found) {
      const Box& b = d.candidate.box;
      dets[f].push_back({scale_box(b, S, S), net::binary_mask(d, size), d.candidate.class_score});
    }
    for (const auto& poly : fr.polygons) gts[f].push_back({bounding_box(poly), rasterize_polygon(poly, S, S), 1.0});

    // The primary detection answers for the ground truth it overlaps most.
    const int primary = select_primary(found);
    int owner = -1;
    if (primary >= 0) {
      const Box pb = scale_box(found[primary].candidate.box, S, S);
      double best = 0.0;
      for (std::size_t g = 0; g < gts[f].size(); ++g) {
        const double iou = box_iou(pb, gts[f][g].box);
        if (iou > best) {
          best = iou;
          owner = static_cast<int>(g);
        }
      }
    }
    for (std::size_t g = 0; g < fr.labels.size() && g < fr.polygons.size(); ++g) {
      labels.push_back(fr.labels[g]);
      estimates.push_back(static_cast<int>(g) == owner ? found[primary].dims : net::DimensionEstimate{});
    }
  }
  MetricReport r;
  r.images = frames.size();
  r.instances = labels.size();
  const auto bb = evaluate_map(dets, gts, MapKind::BBox);
  const auto sg = evaluate_map(dets, gts, MapKind::Segm);
  const auto mp = evaluate_mape(estimates, labels);
  r.bbox_map = bb.value;
  r.segm_map = sg.value;
  r.hnw_mape = mp.value;
  double l1 = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    l1 += 0.5 * (std::abs(estimates[i].width_m - labels[i].width_m) + std::abs(estimates[i].height_m - labels[i].height_m));
  }
  r.hnw_l1 = labels.empty() ? std::numeric_limits<double>::quiet_NaN() : l1 / labels.size();
  r.flagged = bb.flagged || mp.flagged;
  return r;
}

// ---- training loop ----

TrainResult train(const TrainConfig& cfg, const std::vector<AnnotatedFrame>& frames, ProgressFn progress) {
  cfg.validate();
  if (frames.empty()) throw PreconditionError("train: no frames");
  const int S = cfg.network.input_size;
  const cv::Size size(S, S);
  const TrackSplit split = split_by_track(frames, cfg.val_fraction, cfg.seed);
  if (split.train.empty()) throw PreconditionError("train: the split left no training frames");

  net::PmodeNet net(cfg.network, cfg.seed);
  nn::Optimizer opt(cfg.optimizer);
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x7a11u));

  const bool augmenting = cfg.augment.any_photometric() || cfg.augment.any_geometric() ||
                          cfg.augment.rot90_probability > 0.0 || cfg.augment.mask_extension_probability > 0.0;
  std::vector<AnnotatedFrame> resized(frames.size());
  std::vector<std::vector<InstanceTarget>> cached(frames.size());
  for (std::size_t i : split.train) {
    resized[i] = resize_frame(frames[i], size);
    if (!augmenting) cached[i] = build_targets(resized[i], net, cfg);
  }
  std::vector<AnnotatedFrame> val;
  for (std::size_t i : split.val) val.push_back(resize_frame(frames[i], size));

  TrainResult result;
  std::optional<losses::LossLog> log;
  std::ofstream metrics;
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    log.emplace(cfg.output_dir / "loss_log.csv");
    metrics.open(cfg.output_dir / "metrics.csv");
    metrics << "epoch,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total,bbox_map,segm_map,hnw_mape,hnw_l1\n";
    result.best_checkpoint = cfg.output_dir / "best.ckpt";
    result.last_checkpoint = cfg.output_dir / "last.ckpt";
  }
  auto extra = [&](int epoch, const std::optional<MetricReport>& m) {
    json e;
    e["epoch"] = epoch;
    e["train_config"] = train_config_to_json(cfg);
    if (m) e["metrics"] = metric_report_to_json(*m);
    return e;
  };

  const long per_epoch = (static_cast<long>(split.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = per_epoch * cfg.epochs;
  long step = 0;
  std::vector<std::size_t> order = split.train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    losses::LossReport epoch_sum;
    long epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      net.zero_grad();
      losses::LossReport batch;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        if (!augmenting) {
          batch += train_image(net, resized[i], cached[i], cfg, scale).scaled(scale);
          continue;
        }
        const auto aug = augment::augment_frame(frames[i], cfg.augment, rng);
        const AnnotatedFrame fr = aug ? resize_frame(*aug, size) : resized[i];
        batch += train_image(net, fr, build_targets(fr, net, cfg), cfg, scale).scaled(scale);
      }
      bool ok = finite(batch);
      for (auto* p : net.parameters()) {
        for (float v : p->grad) ok = ok && std::isfinite(v);
        if (!ok) break;
      }
      if (!ok) {
        result.diverged = true;
        result.message = "non-finite loss at step " + std::to_string(step) + "; keeping the last good checkpoint";
        return result;
      }
      const double lr = cfg.schedule == "cosine" ? nn::cosine_lr(cfg.optimizer.learning_rate, step, total_steps)
                                                 : cfg.optimizer.learning_rate;
      opt.step(net.parameters(), lr);
      if (log) log->append(step, batch);
      result.steps.push_back(batch);
      epoch_sum += batch;
      ++epoch_steps;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_sum.scaled(1.0 / std::max<long>(1, epoch_steps));
    const bool last = epoch + 1 == cfg.epochs;
    if (!val.empty() && ((epoch + 1) % cfg.eval_interval == 0 || last)) {
      rec.val = evaluate(net, val);
      if (std::isfinite(rec.val->hnw_mape) && rec.val->hnw_mape < result.best_mape) {
        result.best_mape = rec.val->hnw_mape;
        result.best_epoch = epoch;
        result.best_model = std::make_shared<net::PmodeNet>(net);
        if (!result.best_checkpoint.empty()) net::save_checkpoint(net, result.best_checkpoint, extra(epoch, rec.val));
      }
    }
    if (!result.last_checkpoint.empty()) net::save_checkpoint(net, result.last_checkpoint, extra(epoch, rec.val));
    if (metrics.is_open()) {
      const auto& t = rec.train_loss;
      metrics << epoch << ',' << fmt(t.l_seg) << ',' << fmt(t.l_corner) << ',' << fmt(t.l_hnw) << ','
              << fmt(t.l_bbox) << ',' << fmt(t.l_cls) << ',' << fmt(t.l_total);
      if (rec.val) {
        metrics << ',' << fmt(rec.val->bbox_map) << ',' << fmt(rec.val->segm_map) << ',' << fmt(rec.val->hnw_mape)
                << ',' << fmt(rec.val->hnw_l1);
      } else {
        metrics << ",,,,";
      }
      metrics << '\n' << std::flush;
    }
    result.history.push_back(rec);
    if (progress) progress(rec);
  }
  if (!result.best_model) {
    // No validation split: the final weights stand in as the best.
    result.best_model = std::make_shared<net::PmodeNet>(net);
    result.best_epoch = cfg.epochs - 1;
    if (!result.best_checkpoint.empty()) net::save_checkpoint(net, result.best_checkpoint, extra(cfg.epochs - 1, {}));
  }
  result.final_model = std::make_shared<net::PmodeNet>(net);
  return result;
}

TrainResult train(const TrainConfig& cfg, ProgressFn progress) {
  cfg.validate(true);
  const auto manifest = load_dataset(cfg.dataset);
  return train(cfg, load_frames(manifest, cfg.dataset.parent_path()), std::move(progress));
}

std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, TrainConfig>>& configs,
                                      const std::vector<AnnotatedFrame>& frames, const std::filesystem::path& csv) {
  if (configs.size() < 2) throw PreconditionError("run_ablation: needs at least two configs");
  std::vector<AblationRow> rows;
  for (const auto& [name, cfg] : configs) {
    AblationRow row;
    row.name = name;
    try {
      const auto res = train(cfg, frames);
      if (res.diverged) throw Error(res.message);
      if (res.best_epoch >= 0 && res.best_epoch < static_cast<int>(res.history.size()) &&
          res.history[res.best_epoch].val) {
        row.metrics = *res.history[res.best_epoch].val;
      } else {
        row.metrics = evaluate(*res.best_model, frames);
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      row.metrics.bbox_map = row.metrics.segm_map = row.metrics.hnw_mape = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(std::move(row));
  }
  if (!csv.empty()) {
    if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
    std::ofstream out(csv);
    if (!out) throw IoError("cannot write " + csv.string());
    out << "name,bbox_map,segm_map,hnw_mape\n";
    for (const auto& r : rows) {
      out << r.name << ',' << fmt(r.metrics.bbox_map) << ',' << fmt(r.metrics.segm_map) << ',' << fmt(r.metrics.hnw_mape)
          << '\n';
    }
  }
  return rows;
}

}  // namespace pmode::train
