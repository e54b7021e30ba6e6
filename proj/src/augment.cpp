#include "pmode/augment.hpp"

#include <cmath>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pmode/synth_scene.hpp"

namespace pmode::augment {

namespace {

double uniform(Rng& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }
int uniform_int(Rng& rng, int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); }
bool coin(Rng& rng, double p) { return p > 0.0 && uniform(rng, 0.0, 1.0) < p; }

// Sutherland-Hodgman against one half-plane; `inside` and `cut` describe the edge.
template <typename Inside, typename Cut>
Polygon clip_edge(const Polygon& in, Inside inside, Cut cut) {
  Polygon out;
  const std::size_t n = in.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point2& cur = in[i];
    const Point2& prev = in[(i + n - 1) % n];
    const bool ci = inside(cur);
    const bool pi = inside(prev);
    if (ci) {
      if (!pi) out.push_back(cut(prev, cur));
      out.push_back(cur);
    } else if (pi) {
      out.push_back(cut(prev, cur));
    }
  }
  return out;
}

Polygon clip_to_frame(const Polygon& poly, double w, double h) {
  auto cut_x = [](double x) {
    return [x](const Point2& a, const Point2& b) {
      const double t = (x - a.x) / (b.x - a.x);
      return Point2{x, a.y + t * (b.y - a.y)};
    };
  };
  auto cut_y = [](double y) {
    return [y](const Point2& a, const Point2& b) {
      const double t = (y - a.y) / (b.y - a.y);
      return Point2{a.x + t * (b.x - a.x), y};
    };
  };
  Polygon p = poly;
  p = clip_edge(p, [](const Point2& q) { return q.x >= 0.0; }, cut_x(0.0));
  if (p.empty()) return p;
  p = clip_edge(p, [w](const Point2& q) { return q.x <= w; }, cut_x(w));
  if (p.empty()) return p;
  p = clip_edge(p, [](const Point2& q) { return q.y >= 0.0; }, cut_y(0.0));
  if (p.empty()) return p;
  p = clip_edge(p, [h](const Point2& q) { return q.y <= h; }, cut_y(h));
  return p;
}

bool inside_closed(const Polygon& poly, double w, double h) {
  for (const auto& p : poly) {
    if (!(p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h)) return false;
  }
  return true;
}

}  // namespace

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError(std::string(what) + " must be in [0, 1]");
  };
  prob(transform_probability, "transform_probability");
  prob(rot90_probability, "rot90_probability");
  prob(mask_extension_probability, "mask_extension_probability");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) {
    throw PreconditionError("max_rotation_deg must be in [0, 180]");
  }
  if (jpeg_quality_min < 1 || jpeg_quality_max > 100 || jpeg_quality_min > jpeg_quality_max) {
    throw PreconditionError("jpeg quality range must satisfy 1 <= min <= max <= 100");
  }
  if (median_blur_ksize < 1 || median_blur_ksize % 2 == 0) {
    throw PreconditionError("median_blur_ksize must be a positive odd number");
  }
  if (mask_extension_max_px < 0) throw PreconditionError("mask_extension_max_px must be >= 0");
}

bool AugmentConfig::any_photometric() const {
  return brightness_contrast || rgb_shift || hue_saturation_value || jpeg_compression || channel_shuffle ||
         median_blur;
}

bool AugmentConfig::any_geometric() const { return horizontal_flip || vertical_flip || rotate; }

AugmentConfig standard_photometric() {
  AugmentConfig c;
  c.brightness_contrast = true;
  c.rgb_shift = true;
  c.hue_saturation_value = true;
  c.jpeg_compression = true;
  c.channel_shuffle = true;
  c.median_blur = true;
  return c;
}

cv::Mat shuffle_channels(const cv::Mat& image, const std::array<int, 3>& permutation) {
  std::vector<cv::Mat> ch;
  cv::split(image, ch);
  std::vector<cv::Mat> out = {ch[permutation[0]], ch[permutation[1]], ch[permutation[2]]};
  cv::Mat merged;
  cv::merge(out, merged);
  return merged;
}

cv::Mat median_filter(const cv::Mat& image, int ksize) {
  cv::Mat out;
  cv::medianBlur(image, out, ksize);
  return out;
}

cv::Mat jpeg_roundtrip(const cv::Mat& image, int quality) {
  std::vector<unsigned char> buf;
  cv::imencode(".jpg", image, buf, {cv::IMWRITE_JPEG_QUALITY, quality});
  return cv::imdecode(buf, cv::IMREAD_COLOR);
}

cv::Mat adjust_brightness_contrast(const cv::Mat& image, double alpha, double beta) {
  cv::Mat out;
  image.convertTo(out, -1, alpha, beta);
  return out;
}

cv::Mat shift_rgb(const cv::Mat& image, const std::array<int, 3>& shift_bgr) {
  cv::Mat out;
  cv::add(image, cv::Scalar(shift_bgr[0], shift_bgr[1], shift_bgr[2]), out);
  return out;
}

cv::Mat shift_hsv(const cv::Mat& image, int dh, int ds, int dv) {
  cv::Mat hsv;
  cv::cvtColor(image, hsv, cv::COLOR_BGR2HSV);
  for (int i = 0; i < hsv.rows; ++i) {
    auto* row = hsv.ptr<cv::Vec3b>(i);
    for (int j = 0; j < hsv.cols; ++j) {
      row[j][0] = static_cast<unsigned char>(((row[j][0] + dh) % 180 + 180) % 180);
      row[j][1] = cv::saturate_cast<unsigned char>(row[j][1] + ds);
      row[j][2] = cv::saturate_cast<unsigned char>(row[j][2] + dv);
    }
  }
  cv::Mat out;
  cv::cvtColor(hsv, out, cv::COLOR_HSV2BGR);
  return out;
}

AnnotatedFrame apply_photometric(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng) {
  AnnotatedFrame out = frame;
  out.image = frame.image.clone();
  const double p = cfg.transform_probability;
  if (cfg.brightness_contrast && coin(rng, p)) {
    const double alpha = 1.0 + uniform(rng, -cfg.contrast_limit, cfg.contrast_limit);
    const double beta = 255.0 * uniform(rng, -cfg.brightness_limit, cfg.brightness_limit);
    out.image = adjust_brightness_contrast(out.image, alpha, beta);
  }
  if (cfg.rgb_shift && coin(rng, p)) {
    const int l = cfg.rgb_shift_limit;
    out.image = shift_rgb(out.image, {uniform_int(rng, -l, l), uniform_int(rng, -l, l), uniform_int(rng, -l, l)});
  }
  if (cfg.hue_saturation_value && coin(rng, p)) {
    out.image = shift_hsv(out.image, uniform_int(rng, -cfg.hue_shift_limit, cfg.hue_shift_limit),
                          uniform_int(rng, -cfg.sat_shift_limit, cfg.sat_shift_limit),
                          uniform_int(rng, -cfg.val_shift_limit, cfg.val_shift_limit));
  }
  if (cfg.jpeg_compression && coin(rng, p)) {
    out.image = jpeg_roundtrip(out.image, uniform_int(rng, cfg.jpeg_quality_min, cfg.jpeg_quality_max));
  }
  if (cfg.channel_shuffle && coin(rng, p)) {
    std::array<int, 3> perm = {0, 1, 2};
    for (int i = 2; i > 0; --i) std::swap(perm[i], perm[uniform_int(rng, 0, i)]);
    out.image = shuffle_channels(out.image, perm);
  }
  if (cfg.median_blur && coin(rng, p)) {
    out.image = median_filter(out.image, cfg.median_blur_ksize);
  }
  return out;
}

Point2 rotate_point(const Point2& p, double rotation_deg, int width, int height) {
  const double a = rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double cx = 0.5 * width, cy = 0.5 * height;
  const double dx = p.x - cx, dy = p.y - cy;
  return {cx + c * dx + s * dy, cy - s * dx + c * dy};
}

std::optional<AnnotatedFrame> apply_geometric(const AnnotatedFrame& frame, const GeometricParams& params) {
  AnnotatedFrame out = frame;
  out.image = frame.image.clone();
  if (!frame.depth.empty()) out.depth = frame.depth.clone();
  const int W = frame.width();
  const int H = frame.height();

  if (params.hflip) {
    cv::flip(out.image, out.image, 1);
    if (!out.depth.empty()) cv::flip(out.depth, out.depth, 1);
    for (auto& poly : out.polygons) {
      for (auto& p : poly) p.x = W - p.x;
    }
  }
  if (params.vflip) {
    cv::flip(out.image, out.image, 0);
    if (!out.depth.empty()) cv::flip(out.depth, out.depth, 0);
    for (auto& poly : out.polygons) {
      for (auto& p : poly) p.y = H - p.y;
    }
  }
  if (params.rotation_deg != 0.0) {
    // OpenCV puts pixel centers on integers; our continuous frame is offset by half a pixel.
    const cv::Mat M = cv::getRotationMatrix2D(cv::Point2f(0.5f * W - 0.5f, 0.5f * H - 0.5f), params.rotation_deg, 1.0);
    cv::Mat img;
    cv::warpAffine(out.image, img, M, out.image.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
    out.image = img;
    if (!out.depth.empty()) {
      cv::Mat d;
      cv::warpAffine(out.depth, d, M, out.depth.size(), cv::INTER_NEAREST, cv::BORDER_CONSTANT,
                     cv::Scalar(synth::kFarPlaneDepth));
      out.depth = d;
    }
    for (auto& poly : out.polygons) {
      for (auto& p : poly) p = rotate_point(p, params.rotation_deg, W, H);
    }
  }

  for (auto& poly : out.polygons) {
    if (!inside_closed(poly, W, H)) {
      poly = clip_to_frame(poly, W, H);
      if (poly.size() < 3 || polygon_area(poly) < 1e-9) return std::nullopt;
    }
  }
  validate_frame(out);
  return out;
}

std::optional<AnnotatedFrame> apply_geometric(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng) {
  GeometricParams params;
  const double p = cfg.transform_probability;
  if (cfg.horizontal_flip) params.hflip = coin(rng, p);
  if (cfg.vertical_flip) params.vflip = coin(rng, p);
  if (cfg.rotate && coin(rng, p)) params.rotation_deg = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg);
  if (!params.hflip && !params.vflip && params.rotation_deg == 0.0) return frame;
  return apply_geometric(frame, params);
}

AnnotatedFrame rotate90_with_label_swap(const AnnotatedFrame& frame, Rotation90 direction) {
  AnnotatedFrame out = frame;
  const int W = frame.width();
  const int H = frame.height();
  const bool cw = direction == Rotation90::Clockwise;
  const int code = cw ? cv::ROTATE_90_CLOCKWISE : cv::ROTATE_90_COUNTERCLOCKWISE;
  cv::rotate(frame.image, out.image, code);
  if (!frame.depth.empty()) cv::rotate(frame.depth, out.depth, code);
  for (auto& poly : out.polygons) {
    for (auto& p : poly) {
      // Clockwise: (x, y) -> (H - y, x); counter-clockwise: (x, y) -> (y, W - x).
      p = cw ? Point2{H - p.y, p.x} : Point2{p.y, W - p.x};
    }
  }
  for (auto& l : out.labels) std::swap(l.width_m, l.height_m);
  return out;
}

std::optional<AnnotatedFrame> extend_mask_length(const AnnotatedFrame& frame, int px, Axis axis) {
  if (px < 0) throw PreconditionError("extension must be >= 0 pixels");
  if (px == 0) return frame;
  AnnotatedFrame out = frame;
  out.image = frame.image.clone();
  if (!frame.depth.empty()) out.depth = frame.depth.clone();
  const int W = frame.width();
  const int H = frame.height();
  const bool horizontal = axis == Axis::Horizontal;

  for (std::size_t k = 0; k < out.polygons.size(); ++k) {
    auto& poly = out.polygons[k];
    const Box b = bounding_box(poly);
    const double lo = horizontal ? b.x1 : b.y1;
    const double hi = horizontal ? b.x2 : b.y2;
    const double length = hi - lo;
    if (!(length > 0.0)) continue;
    const double scale = (length + px) / length;
    const double center = 0.5 * (lo + hi);
    Polygon stretched = poly;
    for (auto& p : stretched) {
      double& v = horizontal ? p.x : p.y;
      v = center + (v - center) * scale;
    }
    if (!inside_closed(stretched, W, H)) return std::nullopt;

    // Inverse-map the stretched board region back into the source pixels.
    cv::Mat map_x(H, W, CV_32FC1), map_y(H, W, CV_32FC1);
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        double x = j + 0.5, y = i + 0.5;
        double& v = horizontal ? x : y;
        v = center + (v - center) / scale;
        map_x.at<float>(i, j) = static_cast<float>(x - 0.5);
        map_y.at<float>(i, j) = static_cast<float>(y - 0.5);
      }
    }
    const cv::Mat region = rasterize_polygon(stretched, H, W);
    cv::Mat warped;
    cv::remap(frame.image, warped, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_REPLICATE);
    warped.copyTo(out.image, region);
    if (!frame.depth.empty()) {
      cv::Mat wd;
      cv::remap(frame.depth, wd, map_x, map_y, cv::INTER_NEAREST, cv::BORDER_REPLICATE);
      wd.copyTo(out.depth, region);
    }
    poly = std::move(stretched);
    auto& label = out.labels[k];
    (horizontal ? label.width_m : label.height_m) *= scale;
  }
  return out;
}

std::optional<AnnotatedFrame> augment_frame(const AnnotatedFrame& frame, const AugmentConfig& cfg, Rng& rng) {
  std::optional<AnnotatedFrame> cur = cfg.any_photometric() ? apply_photometric(frame, cfg, rng) : frame;
  if (cfg.any_geometric()) {
    cur = apply_geometric(*cur, cfg, rng);
    if (!cur) return std::nullopt;
  }
  if (coin(rng, cfg.rot90_probability)) {
    const auto dir = coin(rng, 0.5) ? Rotation90::Clockwise : Rotation90::CounterClockwise;
    cur = rotate90_with_label_swap(*cur, dir);
  }
  if (cfg.mask_extension_max_px > 0 && coin(rng, cfg.mask_extension_probability)) {
    const int px = uniform_int(rng, 1, cfg.mask_extension_max_px);
    const Axis axis = coin(rng, 0.5) ? Axis::Horizontal : Axis::Vertical;
    auto extended = extend_mask_length(*cur, px, axis);
    if (extended) cur = std::move(extended);
  }
  return cur;
}

DepthMode depth_mode_from_string(const std::string& name) {
  if (name == "none") return DepthMode::None;
  if (name == "multiply") return DepthMode::Multiply;
  if (name == "concat") return DepthMode::Concat;
  throw PreconditionError("unknown depth mode '" + name + "'");
}

std::string to_string(DepthMode mode) {
  switch (mode) {
    case DepthMode::None: return "none";
    case DepthMode::Multiply: return "multiply";
    case DepthMode::Concat: return "concat";
  }
  return "none";
}

DepthIntegration integrate_depth(const cv::Mat& mask, const cv::Mat& depth, DepthMode mode) {
  if (mask.size() != depth.size()) throw ShapeError("mask and depth sizes differ");
  if (mask.channels() != 1 || depth.channels() != 1) throw ShapeError("mask and depth must be single channel");
  cv::Mat m, d;
  mask.convertTo(m, CV_32F);
  depth.convertTo(d, CV_32F);
  double dmin = 0.0;
  bool any = false;
  for (int i = 0; i < m.rows; ++i) {
    const float* mr = m.ptr<float>(i);
    const float* dr = d.ptr<float>(i);
    for (int j = 0; j < m.cols; ++j) {
      if (!(dr[j] > 0.0f)) throw PreconditionError("depth values must be positive");
      if (mr[j] > 0.5f && (!any || dr[j] < dmin)) {
        dmin = dr[j];
        any = true;
      }
    }
  }
  DepthIntegration out;
  if (mode == DepthMode::None) {
    out.output = m;
    return out;
  }
  if (!any) {
    out.flagged = true;
    if (mode == DepthMode::Concat) {
      cv::merge(std::vector<cv::Mat>{m, cv::Mat::zeros(m.size(), CV_32F)}, out.output);
    } else {
      out.output = m;
    }
    return out;
  }
  cv::Mat norm(m.size(), CV_32F);
  for (int i = 0; i < m.rows; ++i) {
    const float* dr = d.ptr<float>(i);
    float* nr = norm.ptr<float>(i);
    for (int j = 0; j < m.cols; ++j) nr[j] = std::min(1.0f, static_cast<float>(dmin / dr[j]));
  }
  if (mode == DepthMode::Multiply) {
    out.output = m.mul(norm);
  } else {
    cv::merge(std::vector<cv::Mat>{m, norm}, out.output);
  }
  return out;
}

}  // namespace pmode::augment
