#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "pmode/losses.hpp"

using namespace pmode;
using namespace pmode::losses;

namespace {

cv::Mat rect_mask(int size, cv::Rect r) {
  cv::Mat m = cv::Mat::zeros(size, size, CV_8U);
  m(r).setTo(1);
  return m;
}

cv::Mat rotated_rect_mask(int size, cv::Point2f center, cv::Size2f dims, float angle) {
  cv::Mat m = cv::Mat::zeros(size, size, CV_8U);
  cv::Point2f v[4];
  cv::RotatedRect(center, dims, angle).points(v);
  std::vector<cv::Point> poly(v, v + 4);
  cv::fillConvexPoly(m, poly, 1);
  return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

}  // namespace

TEST_CASE("bce matches a direct evaluation") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + t % 17;
    std::vector<double> p(n), y(n);
    double ref = 0.0;
    for (int i = 0; i < n; ++i) {
      p[i] = u(rng);
      if (t % 10 == 0) p[i] = (i % 2) ? 0.0 : 1.0;  // exercise the clamp
      y[i] = u(rng) < 0.5 ? 0.0 : 1.0;
      const double pc = std::min(std::max(p[i], 1e-7), 1.0 - 1e-7);
      ref += y[i] == 1.0 ? -std::log(pc) : -std::log(1.0 - pc);
    }
    ref /= n;
    REQUIRE(std::abs(bce_segmentation_loss(p, y) - ref) < 1e-9);
  }
  const std::vector<double> half(64, 0.5), ones(64, 1.0);
  CHECK(bce_segmentation_loss(half, ones) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_segmentation_loss(ones, ones) <= 1e-6);
  CHECK_THROWS_AS(bce_segmentation_loss(std::vector<double>{0.5}, std::vector<double>{1, 0}), ShapeError);
}

TEST_CASE("smooth l1 matches a direct evaluation") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + t % 9;
    std::vector<double> a(n), b(n);
    double ref = 0.0;
    for (int i = 0; i < n; ++i) {
      a[i] = g(rng);
      b[i] = g(rng);
      const double d = std::abs(a[i] - b[i]);
      ref += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
    REQUIRE(std::abs(smooth_l1(a, b) - ref / n) < 1e-9);
  }
}

TEST_CASE("hnw loss uses height then width") {
  const DimensionLabel label{4.0, 1.5};
  CHECK(hnw_loss({1.6, 4.1}, label) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(hnw_loss({1.5, 4.0}, label) == 0.0);
  CHECK(hnw_loss({4.0, 1.5}, label) > 1.0);  // swapped order is penalized

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.5, 13.0);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + t % 5;
    double batch = 0.0, ref = 0.0;
    for (int i = 0; i < n; ++i) {
      const DimensionLabel l{u(rng), u(rng)};
      const double ph = u(rng), pw = u(rng);
      batch += hnw_loss({ph, pw}, l);
      double pair = 0.0;
      for (double d : {ph - l.height_m, pw - l.width_m}) pair += std::abs(d) < 1 ? 0.5 * d * d : std::abs(d) - 0.5;
      ref += pair / 2.0;
    }
    REQUIRE(std::abs(batch / n - ref / n) < 1e-9);
  }
}

TEST_CASE("classification loss matches a direct evaluation and flags empty input") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + t % 7, c = 2 + t % 3;
    std::vector<double> p(n * c);
    std::vector<int> cls(n);
    double ref = 0.0;
    for (int r = 0; r < n; ++r) {
      double s = 0.0;
      for (int k = 0; k < c; ++k) s += (p[r * c + k] = u(rng));
      for (int k = 0; k < c; ++k) p[r * c + k] /= s;
      cls[r] = static_cast<int>(rng() % c);
      ref -= std::log(p[r * c + cls[r]]);
    }
    const auto v = classification_loss(p, c, cls);
    REQUIRE_FALSE(v.flagged);
    REQUIRE(std::abs(v.value - ref / n) < 1e-9);
  }
  const std::vector<double> uniform{0.5, 0.5, 0.5, 0.5}, onehot{1.0, 0.0, 0.0, 1.0};
  const std::vector<int> cls01{0, 1};
  CHECK(classification_loss(uniform, 2, cls01).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(classification_loss(onehot, 2, cls01).value <= 1e-6);
  const auto empty = classification_loss(std::vector<double>{}, 2, std::vector<int>{});
  CHECK(empty.value == 0.0);
  CHECK(empty.flagged);
}

TEST_CASE("analytic gradients agree with central differences") {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::normal_distribution<double> g(0.0, 2.0);
  const double h = 1e-6;
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(6), y(6), a(6), b(6), grad;
    for (int i = 0; i < 6; ++i) {
      p[i] = u(rng);
      y[i] = (rng() % 2) ? 1.0 : 0.0;
      a[i] = g(rng);
      b[i] = g(rng);
      if (std::abs(std::abs(a[i] - b[i]) - 1.0) < 1e-3) a[i] += 0.01;
    }
    bce_segmentation_loss(p, y, &grad);
    for (int i = 0; i < 6; ++i) {
      auto pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      worst = std::max(worst, rel_err((bce_segmentation_loss(pp, y) - bce_segmentation_loss(pm, y)) / (2 * h), grad[i]));
    }
    smooth_l1(a, b, &grad);
    for (int i = 0; i < 6; ++i) {
      auto ap = a, am = a;
      ap[i] += h;
      am[i] -= h;
      worst = std::max(worst, rel_err((smooth_l1(ap, b) - smooth_l1(am, b)) / (2 * h), grad[i]));
    }
    const DimensionLabel lab{u(rng) * 10, u(rng) * 10};
    std::array<double, 2> hw{a[0] + 5, a[1] + 5}, ghw;
    if (std::abs(std::abs(hw[0] - lab.height_m) - 1.0) > 1e-3 && std::abs(std::abs(hw[1] - lab.width_m) - 1.0) > 1e-3) {
      hnw_loss(hw, lab, &ghw);
      for (int i = 0; i < 2; ++i) {
        auto hp = hw, hm = hw;
        hp[i] += h;
        hm[i] -= h;
        worst = std::max(worst, rel_err((hnw_loss(hp, lab) - hnw_loss(hm, lab)) / (2 * h), ghw[i]));
      }
    }
    const std::vector<int> cls{0, 1, 1};
    classification_loss(p, 2, cls, &grad);
    for (int i = 0; i < 6; ++i) {
      auto pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      const double fd = (classification_loss(pp, 2, cls).value - classification_loss(pm, 2, cls).value) / (2 * h);
      if (std::abs(fd) + std::abs(grad[i]) > 0) worst = std::max(worst, rel_err(fd, grad[i]));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("dbscan separates dense groups from noise") {
  std::vector<Point2> pts;
  for (int i = 0; i < 5; ++i) pts.push_back({10.0 + i * 0.5, 10.0});
  for (int i = 0; i < 4; ++i) pts.push_back({50.0, 50.0 + i});
  pts.push_back({100.0, 0.0});
  const auto lab = dbscan(pts, 2.0, 3);
  for (int i = 1; i < 5; ++i) CHECK(lab[i] == lab[0]);
  for (int i = 6; i < 9; ++i) CHECK(lab[i] == lab[5]);
  CHECK(lab[0] != lab[5]);
  CHECK(lab[0] >= 0);
  CHECK(lab[5] >= 0);
  CHECK(lab[9] == -1);
}

TEST_CASE("rectangles yield four corner clusters near their corners") {
  const auto set = detect_corner_clusters(rect_mask(128, cv::Rect(30, 40, 50, 30)), {}, 7);
  REQUIRE(set.centroids.size() == 4);
  CHECK_FALSE(set.flagged);
  CHECK(set.source_mask_id == 7);
  CHECK(set.radius_px == doctest::Approx(8.0));
  for (const cv::Point2d c : {cv::Point2d(30, 40), cv::Point2d(80, 40), cv::Point2d(30, 70), cv::Point2d(80, 70)}) {
    double best = 1e9;
    for (const auto& p : set.centroids) best = std::min(best, std::hypot(p.x - c.x, p.y - c.y));
    CHECK(best < 3.0);
  }

  std::mt19937_64 rng(15);
  std::uniform_real_distribution<float> ang(-80.0f, 80.0f), side(20.0f, 60.0f), ctr(50.0f, 78.0f);
  for (int t = 0; t < 40; ++t) {
    const auto m = rotated_rect_mask(128, {ctr(rng), ctr(rng)}, {side(rng), side(rng)}, ang(rng));
    CAPTURE(t);
    CHECK(detect_corner_clusters(m).centroids.size() == 4);
  }

  // A 90-degree turn maps the clusters along with the mask: (x, y) -> (H - y, x) clockwise.
  const auto base = rect_mask(128, cv::Rect(20, 40, 60, 24));
  cv::Mat turned;
  cv::rotate(base, turned, cv::ROTATE_90_CLOCKWISE);
  const auto a = detect_corner_clusters(base), b = detect_corner_clusters(turned);
  REQUIRE(a.centroids.size() == 4);
  REQUIRE(b.centroids.size() == 4);
  for (const auto& p : a.centroids) {
    double best = 1e9;
    for (const auto& q : b.centroids) best = std::min(best, std::hypot(q.x - (128 - p.y), q.y - p.x));
    CHECK(best < a.radius_px);
  }

  CHECK_THROWS_AS(detect_corner_clusters(cv::Mat::zeros(32, 32, CV_8U)), PreconditionError);
  CHECK(detect_corner_clusters(rect_mask(256, cv::Rect(60, 60, 100, 80))).radius_px == doctest::Approx(16.0));
}

TEST_CASE("corner alignment loss contracts") {
  const auto gt = rect_mask(128, cv::Rect(30, 40, 50, 30));
  const auto clusters = detect_corner_clusters(gt);
  REQUIRE(clusters.centroids.size() == 4);

  cv::Mat same;
  gt.convertTo(same, CV_32F);
  CHECK(corner_alignment_loss(same, gt, clusters).value <= 0.05);

  const auto zero = corner_alignment_loss(cv::Mat::zeros(128, 128, CV_32F), gt, clusters);
  CHECK(zero.value == 1.0);
  CHECK_FALSE(zero.flagged);

  const auto none = corner_alignment_loss(same, gt, CornerClusterSet{});
  CHECK(none.value == 0.0);
  CHECK(none.flagged);

  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> off(-12, 12);
  std::uniform_real_distribution<float> ang(-60.0f, 60.0f);
  for (int t = 0; t < 1000; ++t) {
    cv::Mat pred = t % 2 ? rect_mask(128, cv::Rect(30 + off(rng), 40 + off(rng), 50 + off(rng), 30 + off(rng) / 2))
                         : rotated_rect_mask(128, {55.0f + off(rng), 55.0f + off(rng)}, {50, 30}, ang(rng));
    const double v = corner_alignment_loss(pred, gt, clusters).value;
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  CHECK(corner_alignment_loss(rect_mask(128, cv::Rect(90, 90, 30, 30)), gt, clusters).value == 1.0);

  // Translating both masks together leaves the value unchanged.
  const auto pred = rect_mask(128, cv::Rect(33, 41, 48, 30));
  const double base = corner_alignment_loss(pred, gt, clusters).value;
  const auto gt2 = rect_mask(128, cv::Rect(40, 45, 50, 30));
  const auto pred2 = rect_mask(128, cv::Rect(43, 46, 48, 30));
  CHECK(corner_alignment_loss(pred2, gt2, detect_corner_clusters(gt2)).value == doctest::Approx(base).epsilon(1e-9));

  CHECK_THROWS_AS(corner_alignment_loss(cv::Mat::zeros(64, 64, CV_32F), gt, clusters), ShapeError);
}

TEST_CASE("corner alignment loss matches a reference implementation") {
  const auto gt = rect_mask(128, cv::Rect(30, 40, 50, 30));
  const auto pred = rect_mask(128, cv::Rect(33, 40, 50, 30));
  const auto clusters = detect_corner_clusters(gt);
  REQUIRE(clusters.centroids.size() == 4);

  // Reference: Canny edges, per-circle edge centroids, per-cluster share of 1 - R^2.
  auto edges = [](const cv::Mat& m) {
    cv::Mat e;
    cv::Canny(m * 255, e, 100, 200);
    return e;
  };
  const cv::Mat eg = edges(gt), ep = edges(pred);
  const double r = 8.0;
  auto centroid = [&](const cv::Mat& e, cv::Point2d c, bool& found) {
    cv::Point2d s(0, 0);
    int n = 0;
    for (int i = 0; i < e.rows; ++i)
      for (int j = 0; j < e.cols; ++j)
        if (e.at<uchar>(i, j) && std::hypot(j + 0.5 - c.x, i + 0.5 - c.y) <= r) {
          s += cv::Point2d(j + 0.5, i + 0.5);
          ++n;
        }
    found = n > 0;
    return n ? s / n : c;
  };
  std::vector<cv::Point2d> y, yh;
  std::vector<bool> has;
  for (const auto& c : clusters.centroids) {
    bool fg = false, fp = false;
    y.push_back(centroid(eg, {c.x, c.y}, fg));
    yh.push_back(centroid(ep, {c.x, c.y}, fp));
    has.push_back(fp);
  }
  cv::Point2d mean(0, 0);
  for (const auto& p : y) mean += p / 4.0;
  double ss_tot = 0.0;
  for (const auto& p : y) ss_tot += (p - mean).dot(p - mean);
  double ref = 0.0;
  for (int j = 0; j < 4; ++j) ref += has[j] ? std::min(1.0, 4.0 * (y[j] - yh[j]).dot(y[j] - yh[j]) / ss_tot) : 1.0;
  ref /= 4.0;

  const double v = corner_alignment_loss(pred, gt, clusters).value;
  CHECK(std::abs(v - ref) < 1e-6);
  CHECK(v > 0.0);
}

TEST_CASE("corner surrogate gradient pulls predictions toward the target") {
  const auto gt = rect_mask(64, cv::Rect(16, 16, 30, 20));
  const auto clusters = detect_corner_clusters(gt);
  cv::Mat pred = cv::Mat::zeros(64, 64, CV_64F);
  cv::Mat grad;
  const auto v = corner_alignment_loss(pred, gt, clusters, {}, &grad);
  CHECK(v.value == 1.0);
  // Inside GT near a corner p = 0 < g = 1, so the gradient is negative; nothing changes far away.
  CHECK(grad.at<double>(17, 17) < 0.0);
  CHECK(grad.at<double>(60, 2) == 0.0);
  cv::Mat gt64;
  gt.convertTo(gt64, CV_64F);
  cv::Mat grad_same;
  corner_alignment_loss(gt64, gt, clusters, {}, &grad_same);
  CHECK(cv::norm(grad_same) == 0.0);
}

TEST_CASE("total loss is additive and the csv log has the fixed header") {
  CHECK(total_loss(0, 0, 0, 0, 0).l_total == 0.0);
  CHECK(total_loss(0.1, 0.2, 0.3, 0.05, 0.05).l_total == doctest::Approx(0.7).epsilon(1e-12));
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int t = 0; t < 1000; ++t) {
    const double c[5] = {u(rng), u(rng), u(rng), u(rng), u(rng)};
    const auto rep = total_loss(c[0], c[1], c[2], c[3], c[4], t % 2 == 0);
    const double ref = c[0] + (t % 2 == 0 ? c[1] : 0.0) + c[2] + c[3] + c[4];
    REQUIRE(std::abs(rep.l_total - ref) < 1e-9);
    REQUIRE(std::abs(rep.l_total - (rep.l_seg + rep.l_corner + rep.l_hnw + rep.l_bbox + rep.l_cls)) < 1e-9);
  }
  const auto r = total_loss(0.1, 0.2, 0.3, 0.4, 0.5);
  CHECK(r.l_total == doctest::Approx(1.5).epsilon(1e-12));
  const auto r4 = total_loss(0.1, 0.2, 0.3, 0.4, 0.5, false);
  CHECK(r4.l_corner == 0.0);
  CHECK(r4.l_total == doctest::Approx(1.3).epsilon(1e-12));
  LossReport acc;
  acc += r;
  acc += r4;
  CHECK(acc.scaled(0.5).l_total == doctest::Approx(1.4));

  const auto path = std::filesystem::temp_directory_path() / "pmode_loss_log.csv";
  {
    LossLog log(path);
    log.append(3, r);
  }
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total");
  CHECK(row == loss_csv_row(3, r));
  CHECK(row.rfind("3,0.1,0.2,", 0) == 0);
  std::filesystem::remove(path);
}
