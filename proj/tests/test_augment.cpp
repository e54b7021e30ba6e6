#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "pmode/augment.hpp"

using namespace pmode;
using namespace pmode::augment;

namespace {

AnnotatedFrame fixture(int w = 64, int h = 64, Polygon poly = {{16, 20}, {46, 18}, {48, 40}, {14, 42}}) {
  AnnotatedFrame f;
  f.image = cv::Mat(h, w, CV_8UC3);
  cv::randu(f.image, 0, 255);
  f.depth = cv::Mat(h, w, CV_32FC1, cv::Scalar(10.0f));
  f.polygons = {std::move(poly)};
  f.labels = {{4.0, 1.5}};
  f.occluded = {false};
  return f;
}

double mask_iou(const cv::Mat& a, const cv::Mat& b) {
  const int inter = cv::countNonZero(a & b);
  const int uni = cv::countNonZero(a | b);
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

// Closed-form rotation about the frame center, counter-clockwise on screen (y down).
Point2 rotate_ref(Point2 p, double deg, double w, double h) {
  const double t = deg * M_PI / 180.0;
  const double x = p.x - w / 2, y = p.y - h / 2;
  return {w / 2 + x * std::cos(t) + y * std::sin(t), h / 2 - x * std::sin(t) + y * std::cos(t)};
}

double extent(const Polygon& p, bool horizontal) {
  double lo = 1e300, hi = -1e300;
  for (const auto& v : p) {
    lo = std::min(lo, horizontal ? v.x : v.y);
    hi = std::max(hi, horizontal ? v.x : v.y);
  }
  return hi - lo;
}

// Anti-aliased board: 8x8 supersampled coverage, so the fixture has no raster staircase.
cv::Mat coverage_image(const Polygon& poly, int h, int w) {
  Polygon big = poly;
  for (auto& p : big) p = {p.x * 8, p.y * 8};
  const cv::Mat hi = rasterize_polygon(big, h * 8, w * 8) * 255;
  cv::Mat cov, bgr;
  cv::resize(hi, cov, cv::Size(w, h), 0, 0, cv::INTER_AREA);
  cv::cvtColor(cov, bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

}  // namespace

TEST_CASE("photometric with everything disabled is the identity") {
  const auto f = fixture();
  AugmentConfig cfg;
  Rng rng(1);
  const auto out = apply_photometric(f, cfg, rng);
  CHECK(cv::norm(out.image, f.image, cv::NORM_INF) == 0.0);
  CHECK(out.polygons == f.polygons);
  CHECK(out.labels == f.labels);
}

TEST_CASE("channel shuffle (2,1,0) reverses channels") {
  const auto f = fixture();
  const cv::Mat out = shuffle_channels(f.image, {2, 1, 0});
  cv::Mat rev;
  cv::cvtColor(f.image, rev, cv::COLOR_BGR2RGB);
  CHECK(cv::norm(out, rev, cv::NORM_INF) == 0.0);
}

TEST_CASE("median blur 3x3 matches a brute-force median") {
  cv::Mat img(16, 16, CV_8UC3, cv::Scalar::all(0));
  std::mt19937 rng(5);
  for (int k = 0; k < 40; ++k) img.at<cv::Vec3b>(rng() % 16, rng() % 16) = cv::Vec3b(255, rng() % 256, 128);
  const cv::Mat out = median_filter(img, 3);
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      for (int c = 0; c < 3; ++c) {
        std::vector<int> v;
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = std::clamp(i + di, 0, 15), jj = std::clamp(j + dj, 0, 15);
            v.push_back(img.at<cv::Vec3b>(ii, jj)[c]);
          }
        }
        std::nth_element(v.begin(), v.begin() + 4, v.end());
        REQUIRE(out.at<cv::Vec3b>(i, j)[c] == v[4]);
      }
    }
  }
}

TEST_CASE("photometric transforms never touch polygons or labels") {
  auto cfg = standard_photometric();
  cfg.transform_probability = 1.0;
  const auto f = fixture();
  for (int s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto out = apply_photometric(f, cfg, rng);
    REQUIRE(out.polygons == f.polygons);
    REQUIRE(out.labels == f.labels);
    REQUIRE(out.occluded == f.occluded);
  }
  Rng a(42), b(42);
  CHECK(cv::norm(apply_photometric(f, cfg, a).image, apply_photometric(f, cfg, b).image, cv::NORM_INF) == 0.0);
}

TEST_CASE("horizontal flip mirrors vertices and keeps the label") {
  const auto f = fixture();
  const auto out = apply_geometric(f, GeometricParams{true, false, 0.0});
  REQUIRE(out);
  CHECK(out->labels[0] == DimensionLabel{4.0, 1.5});
  for (std::size_t k = 0; k < f.polygons[0].size(); ++k) {
    CHECK(out->polygons[0][k].x == doctest::Approx(64.0 - f.polygons[0][k].x));
    CHECK(out->polygons[0][k].y == f.polygons[0][k].y);
  }
  cv::Mat flipped;
  cv::flip(f.image, flipped, 1);
  CHECK(cv::norm(out->image, flipped, cv::NORM_INF) == 0.0);
}

TEST_CASE("zero rotation is the identity") {
  const auto f = fixture();
  const auto out = apply_geometric(f, GeometricParams{});
  REQUIRE(out);
  CHECK(out->polygons == f.polygons);
  CHECK(cv::norm(out->image, f.image, cv::NORM_INF) == 0.0);
}

TEST_CASE("15 degree rotation matches the closed-form rotation") {
  const auto f = fixture();
  for (double deg : {15.0, -15.0, 7.5}) {
    const auto out = apply_geometric(f, GeometricParams{false, false, deg});
    REQUIRE(out);
    CHECK(out->labels == f.labels);
    for (std::size_t k = 0; k < f.polygons[0].size(); ++k) {
      const auto r = rotate_ref(f.polygons[0][k], deg, 64, 64);
      CHECK(std::abs(out->polygons[0][k].x - r.x) < 1e-6);
      CHECK(std::abs(out->polygons[0][k].y - r.y) < 1e-6);
    }
  }
}

TEST_CASE("geometric transforms keep masks consistent with pixels") {
  // Area-coverage board on black; the warped pixels and the re-rasterized polygon must agree.
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-15.0, 15.0);
  for (int trial = 0; trial < 30; ++trial) {
    auto f = fixture();
    f.image = coverage_image(f.polygons[0], 64, 64);
    const GeometricParams p{trial % 2 == 0, trial % 3 == 0, u(gen)};
    const auto out = apply_geometric(f, p);
    REQUIRE(out);
    cv::Mat gray, warped;
    cv::cvtColor(out->image, gray, cv::COLOR_BGR2GRAY);
    warped = gray > 127;
    const cv::Mat remask = polygon_to_mask(out->polygons[0], 64, 64).mask * 255;
    REQUIRE(mask_iou(warped, remask) >= 0.98);
  }
}

TEST_CASE("rotation that pushes the board out of frame drops the frame") {
  const auto f = fixture(64, 64, {{0, 0}, {4, 0}, {4, 4}, {0, 4}});
  CHECK(apply_geometric(f, GeometricParams{false, false, 0.0}).has_value());
  CHECK_FALSE(apply_geometric(f, GeometricParams{false, false, 15.0}).has_value());
  // Partly outside: clipped, still inside the closed frame.
  const auto g = fixture(64, 64, {{50, 30}, {64, 30}, {64, 40}, {50, 40}});
  const auto out = apply_geometric(g, GeometricParams{false, false, 15.0});
  REQUIRE(out);
  for (const auto& v : out->polygons[0]) {
    CHECK(v.x >= 0.0);
    CHECK(v.x <= 64.0);
    CHECK(v.y >= 0.0);
    CHECK(v.y <= 64.0);
  }
}

TEST_CASE("rot90 swaps labels and is undone by the opposite turn") {
  auto f = fixture(80, 48, {{10, 10}, {50, 10}, {50, 30}, {10, 30}});
  const auto r = rotate90_with_label_swap(f);
  CHECK(r.width() == 48);
  CHECK(r.height() == 80);
  CHECK(r.labels[0] == DimensionLabel{1.5, 4.0});
  CHECK(polygon_to_mask(r.polygons[0], 80, 48).mask.rows == 80);

  const auto twice = rotate90_with_label_swap(r);
  CHECK(twice.labels[0] == f.labels[0]);

  const auto back = rotate90_with_label_swap(r, Rotation90::CounterClockwise);
  CHECK(back.labels == f.labels);
  CHECK(cv::norm(back.image, f.image, cv::NORM_INF) == 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(back.polygons[0][k].x == doctest::Approx(f.polygons[0][k].x));
    CHECK(back.polygons[0][k].y == doctest::Approx(f.polygons[0][k].y));
  }

  f.labels[0] = {2.0, 2.0};
  CHECK(rotate90_with_label_swap(f).labels[0] == DimensionLabel{2.0, 2.0});
}

TEST_CASE("rot90 moves pixels and polygons together") {
  auto f = fixture(80, 48, {{10, 10}, {50, 10}, {50, 30}, {10, 30}});
  const cv::Mat mask = polygon_to_mask(f.polygons[0], 48, 80).mask;
  f.image = cv::Mat(48, 80, CV_8UC3, cv::Scalar::all(0));
  f.image.setTo(cv::Scalar::all(255), mask);
  for (auto dir : {Rotation90::Clockwise, Rotation90::CounterClockwise}) {
    const auto r = rotate90_with_label_swap(f, dir);
    cv::Mat gray;
    cv::cvtColor(r.image, gray, cv::COLOR_BGR2GRAY);
    const cv::Mat remask = polygon_to_mask(r.polygons[0], r.height(), r.width()).mask * 255;
    CHECK(mask_iou(gray > 127, remask) == 1.0);
  }
}

TEST_CASE("mask extension scales the label with the pixel extent") {
  SUBCASE("zero pixels is the identity") {
    const auto f = fixture();
    const auto out = extend_mask_length(f, 0, Axis::Horizontal);
    REQUIRE(out);
    CHECK(out->polygons == f.polygons);
    CHECK(out->labels == f.labels);
  }
  SUBCASE("200 px board extended to 220 px") {
    const auto f = fixture(320, 180, {{50, 60}, {250, 60}, {250, 110}, {50, 110}});
    const auto out = extend_mask_length(f, 20, Axis::Horizontal);
    REQUIRE(out);
    CHECK(extent(out->polygons[0], true) == doctest::Approx(220.0));
    CHECK(out->labels[0].width_m == doctest::Approx(4.4).epsilon(1e-12));
    CHECK(out->labels[0].height_m == 1.5);
  }
  SUBCASE("random extensions keep the pixel-per-meter ratio") {
    std::mt19937_64 gen(17);
    std::uniform_int_distribution<int> px(1, 30);
    int kept = 0;
    for (int trial = 0; trial < 40; ++trial) {
      const auto f = fixture(320, 180, {{90, 60}, {210, 55}, {215, 110}, {88, 112}});
      const bool horizontal = trial % 2 == 0;
      const auto out = extend_mask_length(f, px(gen), horizontal ? Axis::Horizontal : Axis::Vertical);
      if (!out) continue;
      ++kept;
      const double pix = extent(out->polygons[0], horizontal) / extent(f.polygons[0], horizontal);
      const double lab = horizontal ? out->labels[0].width_m / f.labels[0].width_m
                                    : out->labels[0].height_m / f.labels[0].height_m;
      REQUIRE(std::abs(pix - lab) < 1e-6);
    }
    CHECK(kept == 40);
  }
  SUBCASE("extension past the frame edge drops the frame") {
    const auto f = fixture(320, 180, {{10, 60}, {300, 60}, {300, 110}, {10, 110}});
    CHECK_FALSE(extend_mask_length(f, 40, Axis::Horizontal).has_value());
  }
  SUBCASE("negative extension is a precondition error") {
    CHECK_THROWS_AS(extend_mask_length(fixture(), -1, Axis::Vertical), PreconditionError);
  }
}

TEST_CASE("integrate_depth") {
  cv::Mat mask(8, 8, CV_32F, cv::Scalar(0.0f));
  mask(cv::Rect(2, 2, 4, 4)).setTo(1.0f);
  SUBCASE("uniform depth is the identity in multiply mode") {
    const auto r = integrate_depth(mask, cv::Mat(8, 8, CV_32F, cv::Scalar(7.0f)));
    CHECK_FALSE(r.flagged);
    CHECK(cv::norm(r.output, mask, cv::NORM_INF) == 0.0);
  }
  SUBCASE("empty mask is returned unchanged and flagged") {
    const cv::Mat empty(8, 8, CV_32F, cv::Scalar(0.0f));
    const auto r = integrate_depth(empty, cv::Mat(8, 8, CV_32F, cv::Scalar(3.0f)));
    CHECK(r.flagged);
    CHECK(cv::norm(r.output, empty, cv::NORM_INF) == 0.0);
  }
  SUBCASE("two-plane depth halves the far half") {
    cv::Mat depth(8, 8, CV_32F, cv::Scalar(5.0f));
    depth(cv::Rect(4, 0, 4, 8)).setTo(10.0f);
    const auto r = integrate_depth(mask, depth);
    CHECK(r.output.at<float>(3, 3) == doctest::Approx(1.0));
    CHECK(r.output.at<float>(3, 4) == doctest::Approx(0.5));
    CHECK(r.output.at<float>(0, 0) == 0.0f);
    const auto c = integrate_depth(mask, depth, DepthMode::Concat);
    REQUIRE(c.output.channels() == 2);
    CHECK(c.output.at<cv::Vec2f>(3, 4)[0] == 1.0f);
    CHECK(c.output.at<cv::Vec2f>(3, 4)[1] == doctest::Approx(0.5));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(integrate_depth(mask, cv::Mat(4, 4, CV_32F, cv::Scalar(1.0f))), ShapeError);
    CHECK_THROWS_AS(integrate_depth(mask, cv::Mat(8, 8, CV_32F, cv::Scalar(0.0f))), PreconditionError);
    CHECK_THROWS_AS(depth_mode_from_string("add"), PreconditionError);
    CHECK(depth_mode_from_string("concat") == DepthMode::Concat);
  }
}

TEST_CASE("augment_frame with label-changing transforms stays consistent") {
  AugmentConfig cfg = standard_photometric();
  cfg.horizontal_flip = cfg.vertical_flip = cfg.rotate = true;
  cfg.rot90_probability = 0.5;
  cfg.mask_extension_max_px = 10;
  cfg.mask_extension_probability = 0.5;
  cfg.validate();
  const auto f = fixture(160, 120, {{50, 40}, {110, 40}, {110, 70}, {50, 70}});
  for (int s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto out = augment_frame(f, cfg, rng);
    REQUIRE(out);
    CHECK_NOTHROW(validate_frame(*out));
  }
  AugmentConfig bad;
  bad.rot90_probability = 1.5;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
}
