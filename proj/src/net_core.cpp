#include "pmode/net_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <opencv2/imgproc.hpp>

namespace pmode::net {

namespace {

constexpr double kVarCenter = 0.1;
constexpr double kVarSize = 0.2;
constexpr double kMaxLogSize = 4.135;  // log(1000 / 16), the usual delta clamp
constexpr char kMagic[8] = {'P', 'M', 'O', 'D', 'E', 'C', 'K', 'P'};

nn::Tensor conv_act(const nn::Conv2d& c, const nn::Tensor& x, bool relu, ConvStep* st) {
  nn::Tensor y = c.forward(x, st ? &st->conv : nullptr);
  if (relu) nn::relu_inplace(y);
  if (st && relu) st->out = y;
  return y;
}

nn::Tensor conv_act_back(nn::Conv2d& c, nn::Tensor dy, bool relu, const ConvStep& st, bool need_dx = true) {
  if (relu) nn::relu_backward_inplace(dy, st.out);
  return c.backward(dy, st.conv, need_dx);
}

void append(std::vector<nn::Parameter*>& out, nn::Conv2d& c) {
  out.push_back(&c.weight);
  out.push_back(&c.bias);
}

void init_scaled(nn::Conv2d& c, nn::Rng& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& w : c.weight.value) w = static_cast<float>(n(rng));
  std::fill(c.bias.value.begin(), c.bias.value.end(), 0.0f);
}

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

void NetworkConfig::validate() const {
  if (input_size < 32) throw PreconditionError("input_size must be >= 32");
  if (k_prototypes < 1 || k_prototypes > 100) throw PreconditionError("k_prototypes must be in [1, 100]");
  if (backbone_preset != "tiny" && backbone_preset != "resnet50-like") {
    throw PreconditionError("unknown backbone preset '" + backbone_preset + "'");
  }
  if (!(backbone_width > 0.0)) throw PreconditionError("backbone_width must be positive");
  if (fpn_channels < 1) throw PreconditionError("fpn_channels must be >= 1");
  if (mlp_mask_size < 1) throw PreconditionError("mlp_mask_size must be >= 1");
  if (mlp_layers != static_cast<int>(mlp_hidden.size()) + 1) {
    throw PreconditionError("mlp_layers must equal the number of hidden widths + 1");
  }
  if (anchor_ratios.empty()) throw PreconditionError("need at least one anchor ratio");
  if (anchor_sizes.size() != 3) throw PreconditionError("need one anchor size per pyramid level (3)");
  if (!(nms_iou_threshold > 0.0 && nms_iou_threshold <= 1.0)) throw PreconditionError("nms threshold in (0, 1]");
  if (!(score_threshold >= 0.0 && score_threshold < 1.0)) throw PreconditionError("score threshold in [0, 1)");
}

int NetworkConfig::mlp_input_length() const {
  const int planes = depth_mode == augment::DepthMode::Concat ? 2 : 1;
  return planes * mlp_mask_size * mlp_mask_size + k_prototypes;
}

std::vector<int> NetworkConfig::mlp_widths() const {
  std::vector<int> w{mlp_input_length()};
  w.insert(w.end(), mlp_hidden.begin(), mlp_hidden.end());
  w.push_back(2);
  return w;
}

nlohmann::ordered_json config_to_json(const NetworkConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = c.input_size;
  j["k_prototypes"] = c.k_prototypes;
  j["backbone_preset"] = c.backbone_preset;
  j["backbone_width"] = c.backbone_width;
  j["fpn_channels"] = c.fpn_channels;
  j["mlp_mask_size"] = c.mlp_mask_size;
  j["mlp_layers"] = c.mlp_layers;
  j["mlp_hidden"] = c.mlp_hidden;
  j["anchor_ratios"] = c.anchor_ratios;
  j["anchor_sizes"] = c.anchor_sizes;
  j["nms_iou_threshold"] = c.nms_iou_threshold;
  j["score_threshold"] = c.score_threshold;
  j["pre_nms_top_n"] = c.pre_nms_top_n;
  j["max_detections"] = c.max_detections;
  j["depth_mode"] = augment::to_string(c.depth_mode);
  return j;
}

NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.input_size = j.value("input_size", c.input_size);
    c.k_prototypes = j.value("k_prototypes", c.k_prototypes);
    c.backbone_preset = j.value("backbone_preset", c.backbone_preset);
    c.backbone_width = j.value("backbone_width", c.backbone_width);
    c.fpn_channels = j.value("fpn_channels", c.fpn_channels);
    c.mlp_mask_size = j.value("mlp_mask_size", c.mlp_mask_size);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.mlp_layers = j.value("mlp_layers", static_cast<int>(c.mlp_hidden.size()) + 1);
    c.anchor_ratios = j.value("anchor_ratios", c.anchor_ratios);
    c.anchor_sizes = j.value("anchor_sizes", c.anchor_sizes);
    c.nms_iou_threshold = j.value("nms_iou_threshold", c.nms_iou_threshold);
    c.score_threshold = j.value("score_threshold", c.score_threshold);
    c.pre_nms_top_n = j.value("pre_nms_top_n", c.pre_nms_top_n);
    c.max_detections = j.value("max_detections", c.max_detections);
    c.depth_mode = augment::depth_mode_from_string(j.value("depth_mode", std::string("none")));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Anchor> make_anchors(const NetworkConfig& cfg, const std::vector<cv::Size>& level_sizes) {
  std::vector<Anchor> out;
  const double in = cfg.input_size;
  for (std::size_t l = 0; l < level_sizes.size(); ++l) {
    const double size = cfg.anchor_sizes[l] * in / 128.0;
    const int h = level_sizes[l].height, w = level_sizes[l].width;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (double r : cfg.anchor_ratios) {
          const double s = std::sqrt(r);
          out.push_back({(j + 0.5) * in / w, (i + 0.5) * in / h, size * s, size / s});
        }
      }
    }
  }
  return out;
}

std::array<double, 4> encode_box(const Box& gt, const Anchor& a) {
  const double gw = std::max(gt.width(), 1e-6), gh = std::max(gt.height(), 1e-6);
  return {(gt.center_x() - a.cx) / (kVarCenter * a.w), (gt.center_y() - a.cy) / (kVarCenter * a.h),
          std::log(gw / a.w) / kVarSize, std::log(gh / a.h) / kVarSize};
}

Box decode_box(const std::array<double, 4>& d, const Anchor& a) {
  const double cx = a.cx + d[0] * kVarCenter * a.w;
  const double cy = a.cy + d[1] * kVarCenter * a.h;
  const double w = a.w * std::exp(std::min(d[2] * kVarSize, kMaxLogSize));
  const double h = a.h * std::exp(std::min(d[3] * kVarSize, kMaxLogSize));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

PmodeNet::PmodeNet(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  nn::Rng rng(mix_seed(seed, 0x6e6574ULL));
  const int F = cfg_.fpn_channels;
  const int K = cfg_.k_prototypes;

  auto add_plain = [&](const std::string& name, int in, int out, int stride) {
    Block b;
    b.convs.emplace_back(name + ".conv0", in, out, 3, stride);
    b.convs.emplace_back(name + ".conv1", out, out, 3, 1);
    for (auto& c : b.convs) c.init(rng);
    blocks_.push_back(std::move(b));
  };
  auto add_bottleneck = [&](const std::string& name, int in, int mid, int out, int stride) {
    Block b;
    b.bottleneck = true;
    b.convs.emplace_back(name + ".conv0", in, mid, 1, 1);
    b.convs.emplace_back(name + ".conv1", mid, mid, 3, stride);
    b.convs.emplace_back(name + ".conv2", mid, out, 1, 1);
    b.convs[0].init(rng);
    b.convs[1].init(rng);
    b.convs[2].init(rng, 0.05);  // near-identity residual start without normalization layers
    if (in != out || stride != 1) {
      b.proj.emplace(name + ".proj", in, out, 1, stride, 0);
      b.proj->init(rng, 1.0);
    }
    blocks_.push_back(std::move(b));
  };

  if (cfg_.backbone_preset == "tiny") {
    const int widths[5] = {16, 32, 48, 64, 96};
    stem_ = nn::Conv2d("backbone.stem", 3, widths[0], 3, 2);
    stem_.init(rng);
    for (int s = 0; s < 4; ++s) {
      add_plain("backbone.stage" + std::to_string(s) + ".block0", widths[s], widths[s + 1], 2);
      stage_end_.push_back(static_cast<int>(blocks_.size()) - 1);
      stage_channels_.push_back(widths[s + 1]);
    }
  } else {
    const int base = std::max(4, static_cast<int>(std::lround(64 * cfg_.backbone_width)));
    const int depth[4] = {3, 4, 6, 3};
    stem_ = nn::Conv2d("backbone.stem", 3, base, 3, 2);
    stem_.init(rng);
    int in = base;
    for (int s = 0; s < 4; ++s) {
      const int mid = base << s;
      const int out = mid * 4;
      for (int b = 0; b < depth[s]; ++b) {
        add_bottleneck("backbone.stage" + std::to_string(s) + ".block" + std::to_string(b), in, mid, out,
                       b == 0 ? 2 : 1);
        in = out;
      }
      stage_end_.push_back(static_cast<int>(blocks_.size()) - 1);
      stage_channels_.push_back(out);
    }
  }

  // Spatial sizes: every stage halves once.
  int h = stem_.output_size(cfg_.input_size);
  for (int s = 0; s < 4; ++s) {
    h = (h + 2 - 3) / 2 + 1;
    stage_sizes_.push_back(cv::Size(h, h));
  }
  proto_size_ = stage_sizes_[0];
  level_sizes_ = {stage_sizes_[1], stage_sizes_[2], stage_sizes_[3]};

  for (int l = 0; l < 3; ++l) {
    lateral_.emplace_back("fpn.lateral" + std::to_string(l), stage_channels_[l + 1], F, 1, 1, 0);
    lateral_.back().init(rng, 1.0);
    smooth_.emplace_back("fpn.smooth" + std::to_string(l), F, F, 3, 1);
    smooth_.back().init(rng);
  }

  proto_.emplace_back("protonet.conv0", F, F, 3, 1);
  proto_.emplace_back("protonet.conv1", F, F, 3, 1);
  proto_.emplace_back("protonet.conv2", F, F, 3, 1);
  proto_.emplace_back("protonet.conv3", F, K, 1, 1, 0);
  for (auto& c : proto_) c.init(rng);

  const int A = cfg_.anchors_per_cell();
  head_shared_ = nn::Conv2d("head.shared", F, F, 3, 1);
  head_shared_.init(rng);
  head_cls_ = nn::Conv2d("head.cls", F, A * 2, 3, 1);
  init_scaled(head_cls_, rng, 0.01);
  for (int a = 0; a < A; ++a) head_cls_.bias.value[a * 2 + 1] = static_cast<float>(std::log(0.01 / 0.99));
  head_box_ = nn::Conv2d("head.box", F, A * 4, 3, 1);
  init_scaled(head_box_, rng, 0.01);
  head_coef_ = nn::Conv2d("head.coef", F, A * K, 3, 1);
  head_coef_.init(rng, 1.0);

  mlp = nn::Mlp<float>("dimension_head", cfg_.mlp_widths());
  mlp.init(rng);

  anchors_ = make_anchors(cfg_, level_sizes_);
}

nn::Tensor PmodeNet::block_forward(const Block& b, const nn::Tensor& x, BlockCache* cache) const {
  if (cache) {
    cache->steps.assign(b.convs.size(), {});
  }
  auto step = [&](std::size_t i) { return cache ? &cache->steps[i] : nullptr; };
  if (!b.bottleneck) {
    nn::Tensor y = conv_act(b.convs[0], x, true, step(0));
    y = conv_act(b.convs[1], y, true, step(1));
    if (cache) cache->out = y;
    return y;
  }
  nn::Tensor y = conv_act(b.convs[0], x, true, step(0));
  y = conv_act(b.convs[1], y, true, step(1));
  y = conv_act(b.convs[2], y, false, step(2));
  if (b.proj) {
    y.add(b.proj->forward(x, cache ? &cache->proj.conv : nullptr));
  } else {
    y.add(x);
  }
  nn::relu_inplace(y);
  if (cache) cache->out = y;
  return y;
}

nn::Tensor PmodeNet::block_backward(Block& b, const nn::Tensor& dy, const BlockCache& cache) {
  if (!b.bottleneck) {
    nn::Tensor g = conv_act_back(b.convs[1], dy, true, cache.steps[1]);
    return conv_act_back(b.convs[0], g, true, cache.steps[0]);
  }
  nn::Tensor d = dy;
  nn::relu_backward_inplace(d, cache.out);
  nn::Tensor g = conv_act_back(b.convs[2], d, false, cache.steps[2]);
  g = conv_act_back(b.convs[1], g, true, cache.steps[1]);
  g = conv_act_back(b.convs[0], g, true, cache.steps[0]);
  if (b.proj) {
    g.add(b.proj->backward(d, cache.proj.conv));
  } else {
    g.add(d);
  }
  return g;
}

Pyramid PmodeNet::pyramid(const nn::Tensor& image, ForwardCache* cache) const {
  if (image.c != 3 || image.h != cfg_.input_size || image.w != cfg_.input_size) {
    throw ShapeError("expected a 3 x " + std::to_string(cfg_.input_size) + " x " + std::to_string(cfg_.input_size) +
                     " input");
  }
  if (cache) {
    cache->blocks.assign(blocks_.size(), {});
    cache->stage_end = stage_end_;
    cache->lateral.assign(3, {});
    cache->smooth.assign(3, {});
  }
  nn::Tensor x = conv_act(stem_, image, true, cache ? &cache->stem : nullptr);
  std::vector<nn::Tensor> stages;
  std::size_t s = 0;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    x = block_forward(blocks_[b], x, cache ? &cache->blocks[b] : nullptr);
    if (s < stage_end_.size() && static_cast<int>(b) == stage_end_[s]) {
      stages.push_back(x);
      ++s;
    }
  }
  std::vector<nn::Tensor> merged(3);
  for (int l = 2; l >= 0; --l) {
    merged[l] = lateral_[l].forward(stages[l + 1], cache ? &cache->lateral[l].conv : nullptr);
    if (l < 2) {
      const nn::Bilinear up(merged[l + 1].h, merged[l + 1].w, merged[l].h, merged[l].w);
      merged[l].add(up.forward(merged[l + 1]));
    }
  }
  Pyramid p;
  p.proto_size = proto_size_;
  for (int l = 0; l < 3; ++l) {
    p.levels.push_back(conv_act(smooth_[l], merged[l], true, cache ? &cache->smooth[l] : nullptr));
  }
  return p;
}

PrototypeStack PmodeNet::protonet(const Pyramid& pyramid, ForwardCache* cache) const {
  if (cache) cache->proto.assign(proto_.size(), {});
  auto st = [&](std::size_t i) { return cache ? &cache->proto[i] : nullptr; };
  nn::Tensor x = conv_act(proto_[0], pyramid.levels[0], true, st(0));
  x = conv_act(proto_[1], x, true, st(1));
  const nn::Bilinear up(x.h, x.w, proto_size_.height, proto_size_.width);
  x = up.forward(x);
  x = conv_act(proto_[2], x, true, st(2));
  return conv_act(proto_[3], x, true, st(3));
}

void PmodeNet::heads(const Pyramid& pyramid, NetOutput& out, ForwardCache* cache) const {
  const int A = cfg_.anchors_per_cell();
  const int K = cfg_.k_prototypes;
  const std::size_t total = anchors_.size();
  out.cls_logits.assign(total * 2, 0.0f);
  out.box_deltas.assign(total * 4, 0.0f);
  out.coeffs.assign(total * K, 0.0f);
  if (cache) {
    for (auto* v : {&cache->head_shared, &cache->head_cls, &cache->head_box, &cache->head_coef}) v->assign(3, {});
  }
  std::size_t offset = 0;
  for (int l = 0; l < 3; ++l) {
    const nn::Tensor& f = pyramid.levels[l];
    const nn::Tensor s = conv_act(head_shared_, f, true, cache ? &cache->head_shared[l] : nullptr);
    const nn::Tensor cls = head_cls_.forward(s, cache ? &cache->head_cls[l].conv : nullptr);
    const nn::Tensor box = head_box_.forward(s, cache ? &cache->head_box[l].conv : nullptr);
    nn::Tensor coef = head_coef_.forward(s, cache ? &cache->head_coef[l].conv : nullptr);
    for (auto& v : coef.v) v = std::tanh(v);
    if (cache) cache->head_coef[l].out = coef;
    const int hw = f.plane();
    for (int p = 0; p < hw; ++p) {
      for (int a = 0; a < A; ++a) {
        const std::size_t idx = offset + std::size_t(p) * A + a;
        for (int c = 0; c < 2; ++c) out.cls_logits[idx * 2 + c] = cls.v[std::size_t(a * 2 + c) * hw + p];
        for (int c = 0; c < 4; ++c) out.box_deltas[idx * 4 + c] = box.v[std::size_t(a * 4 + c) * hw + p];
        for (int c = 0; c < K; ++c) out.coeffs[idx * K + c] = coef.v[std::size_t(a * K + c) * hw + p];
      }
    }
    offset += std::size_t(hw) * A;
  }
}

NetOutput PmodeNet::forward(const nn::Tensor& image, ForwardCache* cache) const {
  NetOutput out;
  out.pyramid = pyramid(image, cache);
  out.protos = protonet(out.pyramid, cache);
  heads(out.pyramid, out, cache);
  return out;
}

void PmodeNet::backward(const NetGrad& grad, const ForwardCache& cache) {
  const int A = cfg_.anchors_per_cell();
  const int K = cfg_.k_prototypes;
  std::vector<nn::Tensor> dlevels;
  for (const auto& sz : level_sizes_) dlevels.emplace_back(cfg_.fpn_channels, sz.height, sz.width);

  // Heads, shared across levels.
  std::size_t offset = 0;
  for (int l = 0; l < 3; ++l) {
    const int h = level_sizes_[l].height, w = level_sizes_[l].width, hw = h * w;
    nn::Tensor dcls(A * 2, h, w), dbox(A * 4, h, w), dcoef(A * K, h, w);
    bool any = false;
    for (int p = 0; p < hw; ++p) {
      for (int a = 0; a < A; ++a) {
        const std::size_t idx = offset + std::size_t(p) * A + a;
        if (!grad.dcls.empty()) {
          for (int c = 0; c < 2; ++c) dcls.v[std::size_t(a * 2 + c) * hw + p] = grad.dcls[idx * 2 + c];
        }
        if (!grad.dbox.empty()) {
          for (int c = 0; c < 4; ++c) dbox.v[std::size_t(a * 4 + c) * hw + p] = grad.dbox[idx * 4 + c];
        }
        if (!grad.dcoeffs.empty()) {
          for (int c = 0; c < K; ++c) {
            const std::size_t t = std::size_t(a * K + c) * hw + p;
            const float y = cache.head_coef[l].out.v[t];
            dcoef.v[t] = grad.dcoeffs[idx * K + c] * (1.0f - y * y);
          }
        }
      }
    }
    any = !grad.dcls.empty() || !grad.dbox.empty() || !grad.dcoeffs.empty();
    offset += std::size_t(hw) * A;
    if (!any) continue;
    nn::Tensor ds = head_cls_.backward(dcls, cache.head_cls[l].conv);
    ds.add(head_box_.backward(dbox, cache.head_box[l].conv));
    ds.add(head_coef_.backward(dcoef, cache.head_coef[l].conv));
    dlevels[l].add(conv_act_back(head_shared_, ds, true, cache.head_shared[l]));
  }

  // Protonet.
  if (grad.dprotos.size() > 0) {
    nn::Tensor g = conv_act_back(proto_[3], grad.dprotos, true, cache.proto[3]);
    g = conv_act_back(proto_[2], g, true, cache.proto[2]);
    const nn::Bilinear up(level_sizes_[0].height, level_sizes_[0].width, proto_size_.height, proto_size_.width);
    g = up.backward(g);
    g = conv_act_back(proto_[1], g, true, cache.proto[1]);
    dlevels[0].add(conv_act_back(proto_[0], g, true, cache.proto[0]));
  }

  // FPN.
  std::vector<nn::Tensor> dmerged(3);
  for (int l = 0; l < 3; ++l) dmerged[l] = conv_act_back(smooth_[l], dlevels[l], true, cache.smooth[l]);
  std::vector<nn::Tensor> dstage(4);
  for (int l = 0; l < 3; ++l) {
    if (l > 0) {
      const nn::Bilinear up(level_sizes_[l].height, level_sizes_[l].width, level_sizes_[l - 1].height,
                            level_sizes_[l - 1].width);
      dmerged[l].add(up.backward(dmerged[l - 1]));
    }
  }
  for (int l = 0; l < 3; ++l) dstage[l + 1] = lateral_[l].backward(dmerged[l], cache.lateral[l].conv);

  // Backbone.
  nn::Tensor g;
  int s = static_cast<int>(stage_end_.size()) - 1;
  for (int b = static_cast<int>(blocks_.size()) - 1; b >= 0; --b) {
    if (s >= 0 && b == stage_end_[s]) {
      if (dstage[s].size() > 0) {
        if (g.size() == 0) {
          g = dstage[s];
        } else {
          g.add(dstage[s]);
        }
      }
      --s;
    }
    if (g.size() == 0) continue;
    g = block_backward(blocks_[b], g, cache.blocks[b]);
  }
  if (g.size() > 0) conv_act_back(stem_, g, true, cache.stem, false);
}

std::vector<nn::Parameter*> PmodeNet::backbone_parameters() {
  std::vector<nn::Parameter*> out;
  append(out, stem_);
  for (auto& b : blocks_) {
    for (auto& c : b.convs) append(out, c);
    if (b.proj) append(out, *b.proj);
  }
  for (auto& c : lateral_) append(out, c);
  for (auto& c : smooth_) append(out, c);
  return out;
}

std::vector<nn::Parameter*> PmodeNet::protonet_parameters() {
  std::vector<nn::Parameter*> out;
  for (auto& c : proto_) append(out, c);
  return out;
}

std::vector<nn::Parameter*> PmodeNet::head_parameters() {
  std::vector<nn::Parameter*> out;
  append(out, head_shared_);
  append(out, head_cls_);
  append(out, head_box_);
  append(out, head_coef_);
  return out;
}

std::vector<nn::Parameter*> PmodeNet::mlp_parameters() { return mlp.parameters(); }

std::vector<nn::Parameter*> PmodeNet::parameters() {
  std::vector<nn::Parameter*> out = backbone_parameters();
  for (const auto& group : {protonet_parameters(), head_parameters(), mlp_parameters()}) {
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

void PmodeNet::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

nn::Tensor image_to_tensor(const cv::Mat& image, int input_size) {
  if (image.type() != CV_8UC3) throw ShapeError("expected an 8-bit 3-channel image");
  if (image.rows != input_size || image.cols != input_size) {
    throw ShapeError("image is " + std::to_string(image.cols) + "x" + std::to_string(image.rows) + ", network expects " +
                     std::to_string(input_size) + "x" + std::to_string(input_size));
  }
  nn::Tensor t(3, input_size, input_size);
  for (int i = 0; i < input_size; ++i) {
    const auto* row = image.ptr<cv::Vec3b>(i);
    for (int j = 0; j < input_size; ++j) {
      for (int c = 0; c < 3; ++c) t.at(c, i, j) = (static_cast<float>(row[j][c]) - 127.5f) / 64.0f;
    }
  }
  return t;
}

Pyramid extract_pyramid_features(const PmodeNet& net, const cv::Mat& image) {
  return net.pyramid(image_to_tensor(image, net.config().input_size));
}

PrototypeStack protonet_forward(const PmodeNet& net, const Pyramid& pyramid) { return net.protonet(pyramid); }

std::vector<DetectionCandidate> decode_candidates(const PmodeNet& net, const NetOutput& out) {
  const int K = net.config().k_prototypes;
  const double in = net.config().input_size;
  std::vector<DetectionCandidate> cands(net.num_anchors());
  for (int a = 0; a < net.num_anchors(); ++a) {
    auto& c = cands[a];
    const double l0 = out.cls_logits[a * 2], l1 = out.cls_logits[a * 2 + 1];
    c.class_score = 1.0 / (1.0 + std::exp(l0 - l1));
    const std::array<double, 4> d = {out.box_deltas[a * 4], out.box_deltas[a * 4 + 1], out.box_deltas[a * 4 + 2],
                                     out.box_deltas[a * 4 + 3]};
    Box b = decode_box(d, net.anchors()[a]);
    b = {std::clamp(b.x1 / in, 0.0, 1.0), std::clamp(b.y1 / in, 0.0, 1.0), std::clamp(b.x2 / in, 0.0, 1.0),
         std::clamp(b.y2 / in, 0.0, 1.0)};
    // Keep a strict corner ordering after clamping.
    const double eps = 1e-6;
    if (b.x2 - b.x1 < eps) {
      if (b.x2 + eps <= 1.0) b.x2 = b.x1 + eps; else b.x1 = b.x2 - eps;
    }
    if (b.y2 - b.y1 < eps) {
      if (b.y2 + eps <= 1.0) b.y2 = b.y1 + eps; else b.y1 = b.y2 - eps;
    }
    c.box = b;
    c.mask_coeffs.assign(out.coeffs.begin() + std::size_t(a) * K, out.coeffs.begin() + std::size_t(a + 1) * K);
    c.anchor_index = a;
  }
  return cands;
}

std::vector<DetectionCandidate> prediction_heads_forward(const PmodeNet& net, const Pyramid& pyramid) {
  NetOutput out;
  net.heads(pyramid, out);
  return decode_candidates(net, out);
}

cv::Mat assemble_instance_mask(const PrototypeStack& protos, const std::vector<float>& coeffs) {
  if (static_cast<int>(coeffs.size()) != protos.c) {
    throw ShapeError("mask coefficients: expected " + std::to_string(protos.c) + ", got " +
                     std::to_string(coeffs.size()));
  }
  cv::Mat m(protos.h, protos.w, CV_32FC1, cv::Scalar(0.0f));
  float* dst = m.ptr<float>();
  const int n = protos.plane();
  for (int k = 0; k < protos.c; ++k) {
    const float c = coeffs[k];
    const float* p = protos.channel(k);
    for (int i = 0; i < n; ++i) dst[i] += c * p[i];
  }
  for (int i = 0; i < n; ++i) dst[i] = sigmoidf(dst[i]);
  return m;
}

cv::Mat crop_mask(const cv::Mat& mask, const Box& box) {
  cv::Mat out = mask.clone();
  const double x1 = box.x1 * mask.cols, x2 = box.x2 * mask.cols;
  const double y1 = box.y1 * mask.rows, y2 = box.y2 * mask.rows;
  for (int i = 0; i < mask.rows; ++i) {
    const bool row_in = i + 1 > y1 && i < y2;
    for (int j = 0; j < mask.cols; ++j) {
      if (!(row_in && j + 1 > x1 && j < x2)) {
        if (out.channels() == 1) {
          out.at<float>(i, j) = 0.0f;
        } else {
          out.ptr<float>(i)[j * out.channels()] = 0.0f;
        }
      }
    }
  }
  return out;
}

std::vector<DetectionCandidate> fast_nms(std::vector<DetectionCandidate> cands, double iou_threshold, int top_n) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const DetectionCandidate& a, const DetectionCandidate& b) { return a.class_score > b.class_score; });
  if (top_n > 0 && static_cast<int>(cands.size()) > top_n) cands.resize(top_n);
  std::vector<DetectionCandidate> kept;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double max_iou = 0.0;
    for (std::size_t j = 0; j < i; ++j) max_iou = std::max(max_iou, box_iou(cands[j].box, cands[i].box));
    if (max_iou <= iou_threshold) kept.push_back(cands[i]);
  }
  return kept;
}

std::vector<float> dimension_input(const NetworkConfig& cfg, const cv::Mat& cropped_mask,
                                   const std::vector<float>& coeffs, const cv::Mat& depth) {
  if (static_cast<int>(coeffs.size()) != cfg.k_prototypes) throw ShapeError("dimension input: coefficient length");
  cv::Mat m;
  cropped_mask.convertTo(m, CV_32F);
  if (cfg.depth_mode != augment::DepthMode::None) {
    if (depth.empty()) throw PreconditionError("depth integration enabled but no depth raster given");
    cv::Mat d;
    cv::resize(depth, d, m.size(), 0, 0, cv::INTER_NEAREST);
    m = augment::integrate_depth(m, d, cfg.depth_mode).output;
    if (cfg.depth_mode == augment::DepthMode::Concat && m.channels() == 1) {
      cv::merge(std::vector<cv::Mat>{m, cv::Mat::zeros(m.size(), CV_32F)}, m);
    }
  }
  cv::Mat r;
  const int S = cfg.mlp_mask_size;
  cv::resize(m, r, cv::Size(S, S), 0, 0, cv::INTER_AREA);
  std::vector<cv::Mat> planes;
  cv::split(r, planes);
  std::vector<float> v;
  v.reserve(cfg.mlp_input_length());
  for (const auto& p : planes) {
    for (int i = 0; i < S; ++i) v.insert(v.end(), p.ptr<float>(i), p.ptr<float>(i) + S);
  }
  v.insert(v.end(), coeffs.begin(), coeffs.end());
  return v;
}

std::array<double, 2> dimension_head_raw(const PmodeNet& net, const std::vector<float>& input) {
  const Eigen::Map<const Eigen::VectorXf> x(input.data(), static_cast<Eigen::Index>(input.size()));
  const Eigen::VectorXf y = net.mlp.forward(x);
  return {y[0], y[1]};
}

DimensionEstimate dimension_head_forward(const PmodeNet& net, const cv::Mat& mask, const std::vector<float>& coeffs) {
  const auto& cfg = net.config();
  const int S = cfg.mlp_mask_size;
  const int planes = cfg.depth_mode == augment::DepthMode::Concat ? 2 : 1;
  if (mask.rows != S || mask.cols != S || mask.channels() != planes) {
    throw ShapeError("dimension head: mask must be " + std::to_string(S) + "x" + std::to_string(S) + " with " +
                     std::to_string(planes) + " channel(s)");
  }
  if (static_cast<int>(coeffs.size()) != cfg.k_prototypes) throw ShapeError("dimension head: coefficient length");
  cv::Mat m;
  mask.convertTo(m, CV_32F);
  std::vector<cv::Mat> split;
  cv::split(m, split);
  std::vector<float> v;
  for (const auto& p : split) {
    for (int i = 0; i < S; ++i) v.insert(v.end(), p.ptr<float>(i), p.ptr<float>(i) + S);
  }
  v.insert(v.end(), coeffs.begin(), coeffs.end());
  const auto hw = dimension_head_raw(net, v);
  return {std::max(0.0, hw[1]), std::max(0.0, hw[0]), -1};
}

std::vector<Detection> infer_frame(const PmodeNet& net, const cv::Mat& image, const cv::Mat& depth) {
  const auto& cfg = net.config();
  const NetOutput out = net.forward(image_to_tensor(image, cfg.input_size));
  std::vector<DetectionCandidate> cands;
  for (auto& c : decode_candidates(net, out)) {
    if (c.class_score >= cfg.score_threshold) cands.push_back(std::move(c));
  }
  auto kept = fast_nms(std::move(cands), cfg.nms_iou_threshold, cfg.pre_nms_top_n);
  if (static_cast<int>(kept.size()) > cfg.max_detections) kept.resize(cfg.max_detections);
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    Detection d;
    d.candidate = std::move(kept[i]);
    d.mask = crop_mask(assemble_instance_mask(out.protos, d.candidate.mask_coeffs), d.candidate.box);
    const auto hw = dimension_head_raw(net, dimension_input(cfg, d.mask, d.candidate.mask_coeffs, depth));
    d.dims = {std::max(0.0, hw[1]), std::max(0.0, hw[0]), static_cast<int>(i)};
    dets.push_back(std::move(d));
  }
  return dets;
}

cv::Mat binary_mask(const Detection& det, cv::Size size) {
  cv::Mat up;
  cv::resize(det.mask, up, size, 0, 0, cv::INTER_LINEAR);
  cv::Mat out(size, CV_8UC1, cv::Scalar(0));
  const Box& b = det.candidate.box;
  for (int i = 0; i < size.height; ++i) {
    const double y = (i + 0.5) / size.height;
    if (y < b.y1 || y > b.y2) continue;
    const float* src = up.ptr<float>(i);
    auto* dst = out.ptr<unsigned char>(i);
    for (int j = 0; j < size.width; ++j) {
      const double x = (j + 0.5) / size.width;
      dst[j] = (x >= b.x1 && x <= b.x2 && src[j] > 0.5f) ? 1 : 0;
    }
  }
  return out;
}

void save_checkpoint(PmodeNet& net, const std::filesystem::path& path, const nlohmann::json& extra) {
  nlohmann::ordered_json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(net.config());
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  const auto params = net.parameters();
  for (const auto* p : params) {
    header["tensors"].push_back({{"name", p->name}, {"shape", p->shape}, {"offset", offset}, {"count", p->size()}});
    offset += p->size();
  }
  header["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* p : params) {
    out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

PmodeNet load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw SchemaError("not a pmode checkpoint: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("version", std::string()) != kCheckpointVersion) {
    throw SchemaError("unsupported checkpoint version '" + header.value("version", std::string()) + "'");
  }
  PmodeNet net(config_from_json(header.at("config")));
  const auto params = net.parameters();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) throw SchemaError("checkpoint tensor count does not match the network");
  std::vector<float> payload;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != params[i]->name ||
        t.at("count").get<std::size_t>() != params[i]->size()) {
      throw SchemaError("checkpoint tensor '" + t.at("name").get<std::string>() + "' does not match the network");
    }
    in.read(reinterpret_cast<char*>(params[i]->value.data()),
            static_cast<std::streamsize>(params[i]->size() * sizeof(float)));
  }
  if (!in) throw IoError("truncated checkpoint " + path.string());
  if (extra) *extra = header.value("extra", nlohmann::json::object());
  return net;
}

}  // namespace pmode::net
