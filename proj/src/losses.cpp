#include "pmode/losses.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <cstdio>
#include <optional>

#include <opencv2/imgproc.hpp>

namespace pmode::losses {

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

double huber(double d, double* g) {
  const double a = std::abs(d);
  if (a < 1.0) {
    if (g) *g = d;
    return 0.5 * d * d;
  }
  if (g) *g = d > 0 ? 1.0 : -1.0;
  return a - 0.5;
}

cv::Mat to_u8_binary(const cv::Mat& m, double threshold) {
  cv::Mat f;
  m.convertTo(f, CV_64F);
  cv::Mat out = f > threshold;  // 0 / 255
  return out;
}

}  // namespace

double bce_segmentation_loss(std::span<const double> pred, std::span<const double> target,
                             std::vector<double>* grad) {
  require_same(pred.size(), target.size(), "bce_segmentation_loss");
  if (pred.empty()) throw ShapeError("bce_segmentation_loss: empty input");
  const double n = static_cast<double>(pred.size());
  if (grad) grad->assign(pred.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kProbEpsilon, 1.0 - kProbEpsilon);
    const double y = target[i];
    sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (grad && pred[i] > kProbEpsilon && pred[i] < 1.0 - kProbEpsilon) {
      (*grad)[i] = (-y / p + (1.0 - y) / (1.0 - p)) / n;
    }
  }
  return sum / n;
}

double smooth_l1(std::span<const double> pred, std::span<const double> target, std::vector<double>* grad) {
  require_same(pred.size(), target.size(), "smooth_l1");
  if (pred.empty()) throw ShapeError("smooth_l1: empty input");
  const double n = static_cast<double>(pred.size());
  if (grad) grad->assign(pred.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double g = 0.0;
    sum += huber(pred[i] - target[i], &g);
    if (grad) (*grad)[i] = g / n;
  }
  return sum / n;
}

double hnw_loss(const std::array<double, 2>& pred_hw, const DimensionLabel& label, std::array<double, 2>* grad) {
  const std::array<double, 2> target{label.height_m, label.width_m};
  std::vector<double> g;
  const double v = smooth_l1(pred_hw, target, grad ? &g : nullptr);
  if (grad) *grad = {g[0], g[1]};
  return v;
}

LossValue classification_loss(std::span<const double> probs, int classes, std::span<const int> gt_classes,
                              std::vector<double>* grad) {
  if (classes < 2) throw PreconditionError("classification_loss: need at least two classes");
  require_same(probs.size(), gt_classes.size() * static_cast<std::size_t>(classes), "classification_loss");
  if (grad) grad->assign(probs.size(), 0.0);
  if (gt_classes.empty()) return {0.0, true};
  const double n = static_cast<double>(gt_classes.size());
  double sum = 0.0;
  for (std::size_t r = 0; r < gt_classes.size(); ++r) {
    const int c = gt_classes[r];
    if (c < 0 || c >= classes) throw PreconditionError("classification_loss: class " + std::to_string(c) + " out of range");
    const double p = std::max(probs[r * classes + c], kProbEpsilon);
    sum -= std::log(p);
    if (grad && probs[r * classes + c] > kProbEpsilon) (*grad)[r * classes + c] = -1.0 / (p * n);
  }
  return {sum / n, false};
}

double CornerParams::scale_for(cv::Size size) const {
  return static_cast<double>(std::max(size.width, size.height)) / reference_size;
}

std::vector<int> dbscan(const std::vector<Point2>& points, double eps, int min_samples) {
  const std::size_t n = points.size();
  const double eps2 = eps * eps;
  std::vector<std::vector<std::size_t>> nbr(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = points[i].x - points[j].x, dy = points[i].y - points[j].y;
      if (dx * dx + dy * dy <= eps2) nbr[i].push_back(j);
    }
  }
  std::vector<int> label(n, -2);  // -2 unvisited, -1 noise
  int cluster = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] != -2) continue;
    if (static_cast<int>(nbr[i].size()) < min_samples) {
      label[i] = -1;
      continue;
    }
    label[i] = cluster;
    std::deque<std::size_t> queue(nbr[i].begin(), nbr[i].end());
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      if (label[q] == -1) label[q] = cluster;  // border point
      if (label[q] != -2) continue;
      label[q] = cluster;
      if (static_cast<int>(nbr[q].size()) >= min_samples) queue.insert(queue.end(), nbr[q].begin(), nbr[q].end());
    }
    ++cluster;
  }
  return label;
}

CornerClusterSet detect_corner_clusters(const cv::Mat& gt_mask, const CornerParams& params, int source_mask_id) {
  if (gt_mask.empty() || gt_mask.channels() != 1) throw ShapeError("detect_corner_clusters: expected a 1-channel mask");
  cv::Mat f;
  gt_mask.convertTo(f, CV_32F);
  cv::threshold(f, f, 0.0, 1.0, cv::THRESH_BINARY);
  if (cv::countNonZero(f) == 0) throw PreconditionError("detect_corner_clusters: empty mask");

  const double scale = params.scale_for(gt_mask.size());
  CornerClusterSet set;
  set.radius_px = params.radius_px * scale;
  set.source_mask_id = source_mask_id;

  if (params.blur_sigma > 0.0) cv::GaussianBlur(f, f, cv::Size(0, 0), params.blur_sigma * scale);
  cv::Mat response;
  cv::cornerHarris(f, response, params.harris_block_size, params.harris_aperture, params.harris_k);
  double max_r = 0.0;
  cv::minMaxLoc(response, nullptr, &max_r);
  if (!(max_r > 0.0)) {
    set.flagged = true;
    return set;
  }
  const float thr = static_cast<float>(params.response_fraction * max_r);
  std::vector<Point2> pts;
  for (int i = 0; i < response.rows; ++i) {
    const float* row = response.ptr<float>(i);
    for (int j = 0; j < response.cols; ++j) {
      if (row[j] > thr) pts.push_back({j + 0.5, i + 0.5});
    }
  }
  const auto labels = dbscan(pts, params.dbscan_eps * scale, params.dbscan_min_samples);
  const int n_clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<Point2> sum(n_clusters, Point2{0, 0});
  std::vector<int> count(n_clusters, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (labels[i] < 0) continue;
    sum[labels[i]].x += pts[i].x;
    sum[labels[i]].y += pts[i].y;
    ++count[labels[i]];
  }
  for (int c = 0; c < n_clusters; ++c) set.centroids.push_back({sum[c].x / count[c], sum[c].y / count[c]});
  set.flagged = set.centroids.empty();
  return set;
}

std::vector<Point2> mask_edge_points(const cv::Mat& binary_mask, const CornerParams& params) {
  const cv::Mat u8 = to_u8_binary(binary_mask, 0.0);
  cv::Mat edges;
  cv::Canny(u8, edges, params.canny_low, params.canny_high);
  std::vector<Point2> pts;
  for (int i = 0; i < edges.rows; ++i) {
    const auto* row = edges.ptr<unsigned char>(i);
    for (int j = 0; j < edges.cols; ++j) {
      if (row[j]) pts.push_back({j + 0.5, i + 0.5});
    }
  }
  return pts;
}

LossValue corner_alignment_loss(const cv::Mat& pred_mask, const cv::Mat& gt_mask, const CornerClusterSet& clusters,
                                const CornerParams& params, cv::Mat* grad) {
  if (pred_mask.size() != gt_mask.size() || pred_mask.channels() != 1 || gt_mask.channels() != 1) {
    throw ShapeError("corner_alignment_loss: masks must be 1-channel and the same size");
  }
  if (grad) *grad = cv::Mat::zeros(pred_mask.size(), CV_64F);
  const std::size_t m = clusters.centroids.size();
  if (m == 0) return {0.0, true};

  const auto pred_edges = mask_edge_points(to_u8_binary(pred_mask, 0.5), params);
  const auto gt_edges = mask_edge_points(gt_mask, params);
  const double r = clusters.radius_px;
  const double r2 = r * r;

  auto centroid_in = [&](const std::vector<Point2>& pts, const Point2& c) -> std::optional<Point2> {
    double sx = 0.0, sy = 0.0;
    int n = 0;
    for (const auto& p : pts) {
      const double dx = p.x - c.x, dy = p.y - c.y;
      if (dx * dx + dy * dy <= r2) {
        sx += p.x;
        sy += p.y;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return Point2{sx / n, sy / n};
  };

  std::vector<Point2> y(m);
  std::vector<std::optional<Point2>> yhat(m);
  Point2 mean{0, 0};
  for (std::size_t j = 0; j < m; ++j) {
    y[j] = centroid_in(gt_edges, clusters.centroids[j]).value_or(clusters.centroids[j]);
    yhat[j] = centroid_in(pred_edges, clusters.centroids[j]);
    mean.x += y[j].x / m;
    mean.y += y[j].y / m;
  }
  double ss_tot = 0.0;
  for (const auto& p : y) ss_tot += (p.x - mean.x) * (p.x - mean.x) + (p.y - mean.y) * (p.y - mean.y);

  std::vector<double> per(m, 1.0);
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    if (yhat[j]) {
      const double d2 = (y[j].x - yhat[j]->x) * (y[j].x - yhat[j]->x) + (y[j].y - yhat[j]->y) * (y[j].y - yhat[j]->y);
      per[j] = ss_tot > 1e-12 ? std::min(1.0, m * d2 / ss_tot) : std::min(1.0, d2 / r2);
    }
    total += per[j];
  }

  if (grad) {
    cv::Mat p64, g64;
    pred_mask.convertTo(p64, CV_64F);
    gt_mask.convertTo(g64, CV_64F);
    cv::threshold(g64, g64, 0.0, 1.0, cv::THRESH_BINARY);
    for (std::size_t j = 0; j < m; ++j) {
      if (per[j] == 0.0) continue;
      const auto& c = clusters.centroids[j];
      const int i0 = std::max(0, static_cast<int>(std::floor(c.y - r))), i1 = std::min(p64.rows - 1, static_cast<int>(std::ceil(c.y + r)));
      const int j0 = std::max(0, static_cast<int>(std::floor(c.x - r))), j1 = std::min(p64.cols - 1, static_cast<int>(std::ceil(c.x + r)));
      std::vector<cv::Point> inside;
      for (int i = i0; i <= i1; ++i) {
        for (int jj = j0; jj <= j1; ++jj) {
          const double dx = jj + 0.5 - c.x, dy = i + 0.5 - c.y;
          if (dx * dx + dy * dy <= r2) inside.emplace_back(jj, i);
        }
      }
      if (inside.empty()) continue;
      const double w = per[j] * 2.0 / (static_cast<double>(inside.size()) * m);
      for (const auto& q : inside) grad->at<double>(q) += w * (p64.at<double>(q) - g64.at<double>(q));
    }
  }
  return {total / m, false};
}

LossReport& LossReport::operator+=(const LossReport& o) {
  l_seg += o.l_seg;
  l_corner += o.l_corner;
  l_hnw += o.l_hnw;
  l_bbox += o.l_bbox;
  l_cls += o.l_cls;
  l_total += o.l_total;
  return *this;
}

LossReport LossReport::scaled(double s) const {
  return {l_seg * s, l_corner * s, l_hnw * s, l_bbox * s, l_cls * s, l_total * s};
}

LossReport total_loss(double l_seg, double l_corner, double l_hnw, double l_bbox, double l_cls, bool corner_enabled) {
  LossReport r{l_seg, corner_enabled ? l_corner : 0.0, l_hnw, l_bbox, l_cls, 0.0};
  r.l_total = r.l_seg + r.l_corner + r.l_hnw + r.l_bbox + r.l_cls;
  return r;
}

std::string loss_csv_row(long step, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, r.l_seg, r.l_corner, r.l_hnw, r.l_bbox,
                r.l_cls, r.l_total);
  return buf;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw IoError("cannot open loss log " + path.string());
  out_ << "step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total\n";
}

void LossLog::append(long step, const LossReport& r) {
  out_ << loss_csv_row(step, r) << '\n';
  out_.flush();
}

}  // namespace pmode::losses
