#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "pmode/synth_scene.hpp"
#include "pmode/train_eval.hpp"

using namespace pmode;
using namespace pmode::train;
namespace fs = std::filesystem;

namespace {

std::vector<AnnotatedFrame> small_frames(int n, std::uint64_t seed = 3) {
  synth::GeneratorOptions go;
  go.write_files = false;
  return synth::generate_frames(n, seed, synth::default_camera_profiles(), {}, go).frames;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.network.input_size = 64;
  cfg.network.k_prototypes = 8;
  cfg.network.fpn_channels = 16;
  cfg.network.anchor_sizes = {10.0, 22.0, 48.0};
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pmode_te_" + name);
  fs::remove_all(p);
  return p;
}

EvalInstance inst(double x1, double y1, double x2, double y2, double score = 1.0) {
  return {{x1, y1, x2, y2}, {}, score};
}

// Independent PR oracle: rank all detections by score, greedily match each to the
// highest-IoU unmatched ground truth in its image, then integrate.
double oracle_ap(const std::vector<std::vector<EvalInstance>>& dets, const std::vector<std::vector<EvalInstance>>& gts,
                 double thr) {
  struct R {
    std::size_t img, k;
    double s;
  };
  std::vector<R> all;
  int n_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t k = 0; k < dets[i].size(); ++k) all.push_back({i, k, dets[i][k].score});
    n_gt += static_cast<int>(gts[i].size());
  }
  std::stable_sort(all.begin(), all.end(), [](const R& a, const R& b) { return a.s > b.s; });
  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);
  std::vector<bool> tp;
  for (const auto& r : all) {
    const auto& d = dets[r.img][r.k].box;
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts[r.img].size(); ++g) {
      if (taken[r.img][g]) continue;
      const auto& gb = gts[r.img][g].box;
      const double v = oracle::iou({d.x1, d.y1, d.x2, d.y2}, {gb.x1, gb.y1, gb.x2, gb.y2});
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) taken[r.img][best] = true;
    tp.push_back(best >= 0);
  }
  return oracle::ap_101(tp, n_gt);
}

}  // namespace

TEST_CASE("train config json round trip and validation") {
  TrainConfig cfg = tiny_config();
  cfg.corner_loss_enabled = false;
  cfg.optimizer.kind = "adam";
  cfg.augment.horizontal_flip = true;
  cfg.network.depth_mode = augment::DepthMode::Multiply;
  const auto j = train_config_to_json(cfg);
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(train_config_to_json(back).dump() == j.dump());
  CHECK(back.network.depth_mode == augment::DepthMode::Multiply);

  auto bad = nlohmann::json::parse(j.dump());
  bad["epochs"] = 0;
  CHECK_THROWS_AS(train_config_from_json(bad), SchemaError);
  bad = nlohmann::json::parse(j.dump());
  bad["epoch"] = 3;
  CHECK_THROWS_AS(train_config_from_json(bad), SchemaError);
  bad = nlohmann::json::parse(j.dump());
  bad["optimizer"]["kind"] = "rmsprop";
  CHECK_THROWS_AS(train_config_from_json(bad), SchemaError);

  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"epochs": 2, "dataset": "data/manifest.json", "depth_mode": "concat"})";
  const auto loaded = load_train_config(dir / "c.json");
  CHECK(loaded.epochs == 2);
  CHECK(loaded.dataset == dir / "data/manifest.json");
  CHECK(loaded.network.depth_mode == augment::DepthMode::Concat);
  CHECK_THROWS_AS(loaded.validate(true), PreconditionError);
  CHECK_THROWS_AS(load_train_config(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("track split never separates a track") {
  const auto frames = small_frames(60);
  const auto split = split_by_track(frames, 0.2, 9);
  CHECK(split.train.size() + split.val.size() == frames.size());
  std::set<std::int64_t> train_tracks, val_tracks;
  for (auto i : split.train) train_tracks.insert(*frames[i].track_id);
  for (auto i : split.val) val_tracks.insert(*frames[i].track_id);
  for (auto t : val_tracks) CHECK(train_tracks.count(t) == 0);
  CHECK(val_tracks.size() == 4);  // 20 tracks of 3 frames
  const auto again = split_by_track(frames, 0.2, 9);
  CHECK(again.val == split.val);

  std::vector<AnnotatedFrame> untracked(10);
  const auto s2 = split_by_track(untracked, 0.3, 1);
  CHECK(s2.val.size() == 3);
  CHECK(split_by_track(untracked, 0.0, 1).val.empty());
}

TEST_CASE("anchor matching thresholds and forced best anchor") {
  // Anchors against the box [5,15]^2: IoU 1, 80/120, 0, 60/140.
  const std::vector<net::Anchor> anchors = {{10, 10, 10, 10}, {12, 10, 10, 10}, {50, 50, 10, 10}, {14, 10, 10, 10}};
  const auto m = match_anchors(anchors, {{5, 5, 15, 15}}, 0.5, 0.4);
  CHECK(m == std::vector<int>{0, 0, kNegative, kIgnore});

  // A ground truth no anchor overlaps well still gets its best anchor.
  const auto m2 = match_anchors(anchors, {{48, 48, 80, 80}}, 0.5, 0.4);
  CHECK(m2[2] == 0);
  CHECK(std::count(m2.begin(), m2.end(), 0) == 1);
  CHECK(match_anchors(anchors, {}, 0.5, 0.4) == std::vector<int>(4, kNegative));
}

TEST_CASE("map trivial cases") {
  const std::vector<std::vector<EvalInstance>> gt = {{inst(0, 0, 10, 10)}};
  CHECK(evaluate_map({{inst(0, 0, 10, 10)}}, gt, MapKind::BBox).value == 1.0);
  CHECK(evaluate_map({{}}, gt, MapKind::BBox).value == 0.0);
  const auto empty = evaluate_map({{inst(0, 0, 1, 1)}}, {{}}, MapKind::BBox);
  CHECK(std::isnan(empty.value));
  CHECK(empty.flagged);

  cv::Mat m = cv::Mat::zeros(8, 8, CV_8U);
  m(cv::Rect(1, 1, 4, 4)).setTo(1);
  EvalInstance d{{0, 0, 1, 1}, m, 0.9}, g{{0, 0, 1, 1}, m.clone(), 1.0};
  CHECK(evaluate_map({{d}}, {{g}}, MapKind::Segm).value == 1.0);
  cv::Mat half = cv::Mat::zeros(8, 8, CV_8U);
  half(cv::Rect(1, 1, 4, 2)).setTo(1);
  CHECK(mask_iou(half, m) == doctest::Approx(0.5));
  EvalInstance dh{{0, 0, 1, 1}, half, 0.9};
  // Mask IoU 0.5 passes only the first threshold.
  CHECK(evaluate_map({{dh}}, {{g}}, MapKind::Segm).value == doctest::Approx(0.1));
}

TEST_CASE("map on a crafted three detection case") {
  // Two GT in one image; detections: hit A (0.9), miss (0.8), hit B (0.7).
  // Ranked: TP, FP, TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
  // Interpolated: recall <= 0.5 -> 1, recall in (0.5, 1] -> 2/3.
  // 101-point: 51 levels at 1 and 50 levels at 2/3.
  const std::vector<std::vector<EvalInstance>> gts = {{inst(0, 0, 10, 10), inst(20, 20, 30, 30)}};
  const std::vector<std::vector<EvalInstance>> dets = {
      {inst(0, 0, 10, 10, 0.9), inst(50, 50, 60, 60, 0.8), inst(20, 20, 30, 30, 0.7)}};
  const double expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  CHECK(std::abs(average_precision(dets, gts, 0.5, MapKind::BBox) - expected) < 1e-12);
  CHECK(std::abs(evaluate_map(dets, gts, MapKind::BBox).value - expected) < 1e-12);
}

TEST_CASE("map matches the PR oracle on random micro cases") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> pos(0.0, 20.0), ext(2.0, 10.0), sc(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const int images = 1 + t % 3;
    std::vector<std::vector<EvalInstance>> dets(images), gts(images);
    for (int i = 0; i < images; ++i) {
      const int ng = static_cast<int>(rng() % 3), nd = static_cast<int>(rng() % 5);
      for (int k = 0; k < ng; ++k) {
        const double x = pos(rng), y = pos(rng);
        gts[i].push_back(inst(x, y, x + ext(rng), y + ext(rng)));
      }
      for (int k = 0; k < nd; ++k) {
        if (!gts[i].empty() && rng() % 2) {
          // Jittered copy of a ground truth so that matches happen at varied IoU.
          const Box b = gts[i][rng() % gts[i].size()].box;
          const double j = pos(rng) / 10.0;
          dets[i].push_back(inst(b.x1 + j, b.y1, b.x2 + j, b.y2, sc(rng)));
        } else {
          const double x = pos(rng), y = pos(rng);
          dets[i].push_back(inst(x, y, x + ext(rng), y + ext(rng), sc(rng)));
        }
      }
    }
    std::size_t n_gt = 0;
    for (const auto& g : gts) n_gt += g.size();
    if (n_gt == 0) gts[0].push_back(inst(0, 0, 5, 5));
    double sum = 0.0;
    for (int k = 0; k < 10; ++k) sum += oracle_ap(dets, gts, 0.5 + 0.05 * k);
    CAPTURE(t);
    REQUIRE(std::abs(evaluate_map(dets, gts, MapKind::BBox).value - sum / 10.0) < 1e-9);
  }
}

TEST_CASE("mape examples and scale covariance") {
  CHECK(evaluate_mape({{5.0, 2.0, 0}}, {{4.0, 2.0}}).value == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(evaluate_mape({{4.0, 2.0, 0}}, {{4.0, 2.0}}).value == 0.0);
  const auto excluded = evaluate_mape({{4.0, 2.0, 0}, {1.0, 1.0, 1}}, {{4.0, 2.0}, {0.0, 1.0}});
  CHECK(excluded.flagged);
  CHECK(excluded.count == 1);
  CHECK_THROWS_AS(evaluate_mape({}, {{1.0, 1.0}}), ShapeError);

  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.5, 10.0);
  std::vector<net::DimensionEstimate> est, est_c;
  std::vector<DimensionLabel> lab, lab_c;
  for (int i = 0; i < 50; ++i) {
    est.push_back({u(rng), u(rng), i});
    lab.push_back({u(rng), u(rng)});
    est_c.push_back({est.back().width_m * 3.5, est.back().height_m * 3.5, i});
    lab_c.push_back({lab.back().width_m * 3.5, lab.back().height_m * 3.5});
  }
  CHECK(evaluate_mape(est_c, lab_c).value == doctest::Approx(evaluate_mape(est, lab).value).epsilon(1e-12));
}

TEST_CASE("primary selection prefers the right-most confident detection") {
  std::vector<net::Detection> dets(3);
  dets[0].candidate = {0.9, {0.1, 0.1, 0.3, 0.3}, {}, 0};
  dets[1].candidate = {0.6, {0.6, 0.1, 0.8, 0.3}, {}, 1};
  dets[2].candidate = {0.2, {0.8, 0.1, 1.0, 0.3}, {}, 2};  // below half of the best
  CHECK(select_primary(dets) == 1);
  CHECK(select_primary({}) == -1);
}

TEST_CASE("hnw loss leaves protonet gradients untouched") {
  TrainConfig cfg = tiny_config();
  const auto frames = small_frames(2);
  net::PmodeNet net(cfg.network, 4);
  const auto fr = resize_frame(frames[0], {64, 64});
  const auto targets = build_targets(fr, net, cfg);
  REQUIRE(targets.size() == 1);

  auto grads = [&](const std::vector<nn::Parameter*>& ps) {
    std::vector<float> v;
    for (auto* p : ps) v.insert(v.end(), p->grad.begin(), p->grad.end());
    return v;
  };
  auto mlp_norm = [&] {
    double s = 0.0;
    for (auto* p : net.mlp_parameters()) {
      for (float g : p->grad) s += double(g) * g;
    }
    return s;
  };

  net.zero_grad();
  const auto with = train_image(net, fr, targets, cfg);
  const auto proto_with = grads(net.protonet_parameters());
  const auto backbone_with = grads(net.backbone_parameters());
  CHECK(with.l_hnw > 0.0);
  CHECK(mlp_norm() > 0.0);

  net.zero_grad();
  train_image(net, fr, targets, cfg);
  REQUIRE(grads(net.protonet_parameters()) == proto_with);
  auto no_label = targets;
  no_label[0].label = {};
  net.zero_grad();
  const auto without = train_image(net, fr, no_label, cfg);
  CHECK(without.l_hnw == 0.0);
  CHECK(mlp_norm() == 0.0);
  // Bitwise equal: the dimension head contributes exactly zero upstream.
  CHECK(grads(net.protonet_parameters()) == proto_with);
  CHECK(grads(net.backbone_parameters()) == backbone_with);
  CHECK(without.l_seg == with.l_seg);
}

TEST_CASE("loss report additivity holds on a training step") {
  TrainConfig cfg = tiny_config();
  const auto frames = small_frames(4);
  net::PmodeNet net(cfg.network, 4);
  for (const auto& f : frames) {
    const auto fr = resize_frame(f, {64, 64});
    const auto r = train_image(net, fr, build_targets(fr, net, cfg), cfg);
    CHECK(std::abs(r.l_total - (r.l_seg + r.l_corner + r.l_hnw + r.l_bbox + r.l_cls)) < 1e-9);
    CHECK(r.l_seg >= 0.0);
    CHECK(r.l_cls > 0.0);
    CHECK(r.l_corner >= 0.0);
    CHECK(r.l_corner <= 1.0);
  }
  cfg.corner_loss_enabled = false;
  const auto fr = resize_frame(frames[0], {64, 64});
  CHECK(train_image(net, fr, build_targets(fr, net, cfg), cfg).l_corner == 0.0);
}

TEST_CASE("one epoch smoke run writes logs and checkpoints deterministically") {
  const auto frames = small_frames(10);
  TrainConfig cfg = tiny_config();
  cfg.val_fraction = 0.3;
  cfg.output_dir = scratch("smoke_a");
  const auto a = train::train(cfg, frames);
  REQUIRE_FALSE(a.diverged);
  REQUIRE(!a.steps.empty());
  for (const auto& s : a.steps) CHECK(std::isfinite(s.l_total));
  CHECK(fs::exists(a.best_checkpoint));
  CHECK(fs::exists(a.last_checkpoint));
  CHECK(a.history.size() == 1);
  CHECK(a.history[0].val.has_value());
  const auto log = slurp(cfg.output_dir / "loss_log.csv");
  CHECK(log.rfind("step,l_seg,l_corner,l_hnw,l_bbox,l_cls,l_total\n", 0) == 0);

  nlohmann::json extra;
  const auto loaded = net::load_checkpoint(a.best_checkpoint, &extra);
  CHECK(extra["epoch"] == 0);
  CHECK(extra.contains("train_config"));
  CHECK(loaded.config().input_size == 64);

  TrainConfig cfg_b = cfg;
  cfg_b.output_dir = scratch("smoke_b");
  const auto b = train::train(cfg_b, frames);
  CHECK(slurp(cfg_b.output_dir / "loss_log.csv") == log);
  CHECK(slurp(cfg_b.output_dir / "metrics.csv") == slurp(cfg.output_dir / "metrics.csv"));
  CHECK(slurp(b.best_checkpoint).size() == slurp(a.best_checkpoint).size());
  fs::remove_all(cfg.output_dir);
  fs::remove_all(cfg_b.output_dir);
}

TEST_CASE("best checkpoint mape never exceeds the final epoch") {
  const auto frames = small_frames(12);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.val_fraction = 0.25;
  const auto r = train::train(cfg, frames);
  REQUIRE(r.history.size() == 3);
  REQUIRE(r.history.back().val.has_value());
  CHECK(r.best_mape <= r.history.back().val->hnw_mape);
  REQUIRE(r.best_model);
  CHECK(evaluate(*r.best_model, {frames[r.history.size()]}).images == 1);
}

TEST_CASE("divergence aborts the run") {
  const auto frames = small_frames(8);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.schedule = "constant";
  cfg.optimizer.learning_rate = 1e30;
  cfg.output_dir = scratch("diverge");
  const auto r = train::train(cfg, frames);
  CHECK(r.diverged);
  CHECK(r.message.find("non-finite") != std::string::npos);
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("ablation needs two configs and writes one row per config") {
  const auto frames = small_frames(9);
  TrainConfig base = tiny_config();
  base.val_fraction = 0.34;
  CHECK_THROWS_AS(run_ablation({{"only", base}}, frames), PreconditionError);

  TrainConfig depth = base, corner = base;
  base.corner_loss_enabled = false;
  depth.corner_loss_enabled = false;
  depth.network.depth_mode = augment::DepthMode::Multiply;
  corner.network.depth_mode = augment::DepthMode::Multiply;
  const auto csv = scratch("ablation") / "table.csv";
  const auto rows = run_ablation({{"mask-only", base}, {"depth", depth}, {"depth+corner", corner}}, frames, csv);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK_FALSE(r.failed);
  std::ifstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "name,bbox_map,segm_map,hnw_mape");
  CHECK(lines[1].rfind("mask-only,", 0) == 0);
  CHECK(lines[3].rfind("depth+corner,", 0) == 0);
  fs::remove_all(csv.parent_path());
}
