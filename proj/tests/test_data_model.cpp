#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "pmode/data_model.hpp"
#include "pmode/synth_scene.hpp"

using namespace pmode;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pmode_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DatasetManifest two_frame_manifest() {
  DatasetManifest m;
  m.camera_profile_id = "cam-b";
  m.frames.push_back({0, "a.png", 320, 180, 0});
  m.frames.push_back({1, "b.png", 320, 180, 1});
  m.annotations.push_back({0, {{10, 10}, {50, 12}, {48, 30}, {11, 28}}, 4.0, 1.5, false, 7});
  m.annotations.push_back({1, {{100.25, 40}, {150, 40}, {150, 60.5}, {100.25, 60.5}}, 2.5, 0.75, true, std::nullopt});
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("polygon_to_mask: axis-aligned rectangle covers a 10x5 block") {
  const Polygon rect{{10, 10}, {20, 10}, {20, 15}, {10, 15}};
  const auto r = polygon_to_mask(rect, 32, 32);
  CHECK_FALSE(r.degenerate);
  CHECK(cv::countNonZero(r.mask) == 50);
  for (int i = 0; i < 32; ++i) {
    for (int j = 0; j < 32; ++j) {
      const bool expected = i >= 10 && i < 15 && j >= 10 && j < 20;
      REQUIRE(static_cast<bool>(r.mask.at<unsigned char>(i, j)) == expected);
    }
  }
}

TEST_CASE("polygon_to_mask: full-frame rectangle is all ones") {
  const auto r = polygon_to_mask({{0, 0}, {32, 0}, {32, 24}, {0, 24}}, 24, 32);
  CHECK(cv::countNonZero(r.mask) == 24 * 32);
}

TEST_CASE("polygon_to_mask: vertices outside the raster are rejected") {
  CHECK_THROWS_AS(polygon_to_mask({{-5, 2}, {10, 3}, {4, 40}}, 32, 32), PreconditionError);
}

TEST_CASE("polygon_to_mask: zero-area polygon yields an empty flagged mask") {
  const auto r = polygon_to_mask({{1, 1}, {10, 10}, {20, 20}}, 32, 32);
  CHECK(r.degenerate);
  CHECK(cv::countNonZero(r.mask) == 0);
}

TEST_CASE("polygon_to_mask agrees with brute-force even-odd on random polygons") {
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> coord(0.0, 64.0);
  std::uniform_int_distribution<int> nverts(3, 9);
  for (int trial = 0; trial < 100; ++trial) {
    Polygon poly;
    std::vector<oracle::Pt> ref;
    const int n = nverts(rng);
    for (int k = 0; k < n; ++k) {
      const double x = coord(rng), y = coord(rng);
      poly.push_back({x, y});
      ref.push_back({x, y});
    }
    const auto r = polygon_to_mask(poly, 64, 64);
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        const bool expected = !r.degenerate && oracle::point_in_polygon(ref, j + 0.5, i + 0.5);
        REQUIRE(static_cast<bool>(r.mask.at<unsigned char>(i, j)) == expected);
      }
    }
  }
}

TEST_CASE("resize_frame scales vertices and leaves metric labels alone") {
  AnnotatedFrame f;
  f.image = cv::Mat(1080, 1920, CV_8UC3, cv::Scalar(10, 20, 30));
  f.polygons = {{{960, 540}, {1000, 540}, {1000, 600}}};
  f.labels = {{4.0, 1.5}};
  f.occluded = {false};
  const auto r = resize_frame(f, cv::Size(500, 500));
  CHECK(r.image.rows == 500);
  CHECK(r.image.cols == 500);
  CHECK(r.polygons[0][0].x == doctest::Approx(250.0).epsilon(1e-12));
  CHECK(r.polygons[0][0].y == doctest::Approx(540.0 * 500.0 / 1080.0).epsilon(1e-12));
  CHECK(r.labels[0] == DimensionLabel{4.0, 1.5});

  const auto same = resize_frame(f, cv::Size(1920, 1080));
  CHECK(same.polygons == f.polygons);

  const auto back = resize_frame(r, cv::Size(1920, 1080));
  for (std::size_t k = 0; k < f.polygons[0].size(); ++k) {
    CHECK(std::abs(back.polygons[0][k].x - f.polygons[0][k].x) < 1e-9);
    CHECK(std::abs(back.polygons[0][k].y - f.polygons[0][k].y) < 1e-9);
  }
  CHECK_THROWS_AS(resize_frame(f, cv::Size(0, 10)), PreconditionError);
}

TEST_CASE("resize then inverse scaling restores random vertices") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> dim(8, 2000);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = dim(rng), h = dim(rng), w2 = dim(rng), h2 = dim(rng);
    AnnotatedFrame f;
    f.image = cv::Mat(h, w, CV_8UC3, cv::Scalar::all(0));
    Polygon p;
    for (int k = 0; k < 4; ++k) p.push_back({u(rng) * w, u(rng) * h});
    f.polygons = {p};
    f.labels = {{1.0, 1.0}};
    f.occluded = {false};
    const auto back = resize_frame(resize_frame(f, cv::Size(w2, h2)), cv::Size(w, h));
    for (int k = 0; k < 4; ++k) {
      REQUIRE(std::abs(back.polygons[0][k].x - p[k].x) < 1e-9);
      REQUIRE(std::abs(back.polygons[0][k].y - p[k].y) < 1e-9);
    }
  }
}

TEST_CASE("manifest save/load round-trip") {
  const auto dir = temp_dir("manifest");
  SUBCASE("two frames") {
    const auto m = two_frame_manifest();
    save_dataset(m, dir / "m.json");
    const auto loaded = load_dataset(dir / "m.json");
    CHECK(loaded == m);
    CHECK(loaded.annotations_for(0).size() == 1);
  }
  SUBCASE("empty manifest") {
    DatasetManifest m;
    m.camera_profile_id = "none";
    save_dataset(m, dir / "empty.json");
    const auto loaded = load_dataset(dir / "empty.json");
    CHECK(loaded == m);
    CHECK(slurp(dir / "empty.json").find("\"frames\": []") != std::string::npos);
  }
  SUBCASE("byte-stable output with fixed key order") {
    DatasetManifest m;
    m.camera_profile_id = "cam-a";
    m.frames.push_back({3, "x.png", 64, 48, 3});
    m.annotations.push_back({3, {{1.5, 2.25}, {30, 2.25}, {30, 20}}, 3.3, 1.23, false, 1});
    save_dataset(m, dir / "one_a.json");
    save_dataset(load_dataset(dir / "one_a.json"), dir / "one_b.json");
    const auto a = slurp(dir / "one_a.json");
    CHECK(a == slurp(dir / "one_b.json"));
    const auto p_cam = a.find("camera_profile_id");
    const auto p_frames = a.find("\"frames\"");
    const auto p_ann = a.find("\"annotations\"");
    CHECK(p_cam < p_frames);
    CHECK(p_frames < p_ann);
    CHECK(a.find("\"image_id\"") < a.find("\"polygon\""));
    CHECK(a.find("\"height_m\"") < a.find("\"occluded\""));
  }
  SUBCASE("500 synthetic frames") {
    synth::GeneratorOptions opt;
    opt.write_files = false;
    const auto gen = synth::generate_frames(500, 11, synth::default_camera_profiles(), dir, opt);
    save_dataset(gen.manifest, dir / "synth.json");
    CHECK(load_dataset(dir / "synth.json") == gen.manifest);
  }
}

TEST_CASE("manifest errors") {
  SUBCASE("dangling image_id") {
    auto m = two_frame_manifest();
    m.annotations[1].image_id = 99;
    CHECK_THROWS_AS(m.validate(), IntegrityError);
    CHECK_THROWS_AS(manifest_from_json(manifest_to_json(two_frame_manifest()).replace(
                        manifest_to_json(two_frame_manifest()).rfind("\"image_id\": 1"), 13, "\"image_id\": 99")),
                    IntegrityError);
  }
  SUBCASE("schema error names the record") {
    const std::string text =
        R"({"camera_profile_id":"c","frames":[{"id":0,"file":"a.png","width":4,"height":4,"frame_index":0}],)"
        R"("annotations":[{"image_id":0,"polygon":[[0,0],[1,0],[1,1]],"width_m":1.0,"height_m":1.0,"occluded":false,"track_id":null},)"
        R"({"image_id":0,"width_m":1.0,"height_m":1.0,"occluded":false,"track_id":null}]})";
    try {
      manifest_from_json(text);
      FAIL("expected a schema error");
    } catch (const SchemaError& e) {
      CHECK(std::string(e.what()).find("annotations[1]") != std::string::npos);
    }
  }
  SUBCASE("malformed JSON") { CHECK_THROWS_AS(manifest_from_json("{not json"), SchemaError); }
  SUBCASE("unwritable path") {
    CHECK_THROWS_AS(save_dataset(two_frame_manifest(), "/nonexistent_dir_pmode/x.json"), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset("/nonexistent_dir_pmode/x.json"), IoError); }
}

TEST_CASE("depth raster round-trip and header layout") {
  const auto dir = temp_dir("depth");
  cv::Mat d(3, 5, CV_32FC1);
  for (int i = 0; i < 15; ++i) d.at<float>(i / 5, i % 5) = 0.5f * static_cast<float>(i) + 1.0f;
  write_depth_raster(dir / "d.depth", d);
  const auto bytes = slurp(dir / "d.depth");
  REQUIRE(bytes.size() == 8 + 15 * 4);
  CHECK(static_cast<unsigned char>(bytes[0]) == 3);
  CHECK(static_cast<unsigned char>(bytes[4]) == 5);
  const cv::Mat back = read_depth_raster(dir / "d.depth");
  CHECK(cv::norm(back, d, cv::NORM_INF) == 0.0);
}

TEST_CASE("validate_frame rejects mismatched annotation lists") {
  AnnotatedFrame f;
  f.image = cv::Mat(10, 10, CV_8UC3, cv::Scalar::all(0));
  f.polygons = {{{1, 1}, {5, 1}, {5, 5}}};
  f.labels = {};
  f.occluded = {false};
  CHECK_THROWS_AS(validate_frame(f), PreconditionError);
  f.labels = {{1.0, 2.0}};
  CHECK_NOTHROW(validate_frame(f));
  f.labels = {{0.0, 2.0}};
  CHECK_THROWS_AS(validate_frame(f), PreconditionError);
}
