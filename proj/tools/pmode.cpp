// pmode command line: generate / train / eval / infer / ablation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pmode/data_model.hpp"
#include "pmode/synth_scene.hpp"
#include "pmode/train_eval.hpp"
#include "pmode/video_cli.hpp"

namespace fs = std::filesystem;
using namespace pmode;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string metrics_csv(const train::MetricReport& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "bbox_map,segm_map,hnw_mape,hnw_l1,images,instances\n%.9g,%.9g,%.9g,%.9g,%zu,%zu\n",
                m.bbox_map, m.segm_map, m.hnw_mape, m.hnw_l1, m.images, m.instances);
  return buf;
}

void print_epoch(const train::EpochRecord& r) {
  std::printf("epoch %3d  loss %.4f (seg %.4f corner %.4f hnw %.4f bbox %.4f cls %.4f)", r.epoch + 1,
              r.train_loss.l_total, r.train_loss.l_seg, r.train_loss.l_corner, r.train_loss.l_hnw,
              r.train_loss.l_bbox, r.train_loss.l_cls);
  if (r.val) std::printf("  val bbox %.3f segm %.3f mape %.3f", r.val->bbox_map, r.val->segm_map, r.val->hnw_mape);
  std::printf("\n");
  std::fflush(stdout);
}

struct TrainOverrides {
  std::string dataset;
  std::string out;
  int epochs = 0;
  long long seed = -1;
};

train::TrainConfig load_config(const std::string& path, const TrainOverrides& o) {
  auto cfg = train::load_train_config(path);
  if (!o.dataset.empty()) cfg.dataset = o.dataset;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.epochs > 0) cfg.epochs = o.epochs;
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Board detection, segmentation and metric size estimation"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Render a synthetic annotated dataset");
  int count = 500;
  std::uint64_t gen_seed = 0;
  int n_profiles = 3;
  synth::GeneratorOptions gopt;
  std::string gen_out;
  gen->add_option("--count", count, "Number of frames")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--profiles", n_profiles, "Camera profiles to cycle through")->check(CLI::Range(1, 3));
  gen->add_option("--occlusion-rate", gopt.occlusion_rate, "Fraction of frames with an occluder")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--track-length", gopt.track_length, "Frames per track")->check(CLI::PositiveNumber);
  gen->add_flag("--single-profile-tracks", gopt.single_profile_tracks, "Keep one camera per track");
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model from a JSON config");
  std::string cfg_path;
  TrainOverrides over;
  tr->add_option("--config", cfg_path, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--dataset", over.dataset, "Override the dataset manifest");
  tr->add_option("--out", over.out, "Override the output directory");
  tr->add_option("--epochs", over.epochs, "Override the epoch count");
  tr->add_option("--seed", over.seed, "Override the seed");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on an annotated dataset");
  std::string ev_ckpt, ev_data, ev_out, ev_csv;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "Metrics JSON");
  ev->add_option("--csv", ev_csv, "Metrics CSV");

  // infer
  auto* inf = app.add_subcommand("infer", "Run a frame sequence and report per-board dimensions");
  video::InferOptions iopt;
  std::string inf_ckpt, inf_frames, inf_out, inf_csv, inf_report;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--frames", inf_frames, "Directory of frames")->required();
  inf->add_option("--out", inf_out, "Overlay directory");
  inf->add_option("--csv", inf_csv, "Per-frame dimensions CSV");
  inf->add_option("--consistency", inf_report, "Consistency report JSON");
  inf->add_option("--iou", iopt.iou_threshold, "Association IoU threshold");
  inf->add_option("--size-ratio", iopt.max_size_ratio, "Association box size gate (0 disables)");
  inf->add_option("--cv-threshold", iopt.cv_threshold, "Consistency CV threshold");

  // ablation
  auto* ab = app.add_subcommand("ablation", "Train mask-only, corner-loss and depth variants on the same data");
  std::string ab_cfg, ab_csv;
  TrainOverrides ab_over;
  ab->add_option("--config", ab_cfg, "Base TrainConfig JSON")->required()->check(CLI::ExistingFile);
  ab->add_option("--dataset", ab_over.dataset, "Override the dataset manifest");
  ab->add_option("--out", ab_over.out, "Output directory")->required();
  ab->add_option("--epochs", ab_over.epochs, "Override the epoch count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto profiles = synth::default_camera_profiles();
      profiles.resize(static_cast<std::size_t>(n_profiles));
      const auto m = synth::generate_dataset(count, gen_seed, profiles, gen_out, gopt);
      std::printf("wrote %zu frames, %zu annotations to %s\n", m.frames.size(), m.annotations.size(),
                  gen_out.c_str());
      return 0;
    }
    if (*tr) {
      const auto cfg = load_config(cfg_path, over);
      const auto res = train::train(cfg, print_epoch);
      if (res.diverged) {
        std::fprintf(stderr, "error: training diverged: %s\n", res.message.c_str());
        return 3;
      }
      std::printf("best epoch %d, hnw mape %.4f\n", res.best_epoch + 1, res.best_mape);
      if (!res.best_checkpoint.empty()) std::printf("checkpoint %s\n", res.best_checkpoint.string().c_str());
      return 0;
    }
    if (*ev) {
      const auto net = net::load_checkpoint(ev_ckpt);
      const auto manifest = load_dataset(ev_data);
      const auto frames = load_frames(manifest, fs::path(ev_data).parent_path());
      const auto report = train::evaluate(net, frames);
      const std::string json = train::metric_report_to_json(report).dump(2) + "\n";
      std::cout << json;
      if (!ev_out.empty()) write_file(ev_out, json);
      if (!ev_csv.empty()) write_file(ev_csv, metrics_csv(report));
      return 0;
    }
    if (*inf) {
      iopt.checkpoint = inf_ckpt;
      iopt.frames_dir = inf_frames;
      iopt.overlay_dir = inf_out;
      iopt.csv = inf_csv;
      iopt.consistency = inf_report;
      const auto s = video::run_infer(iopt);
      for (const auto& w : s.sequence.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      std::size_t found = 0;
      for (const auto& f : s.sequence.frames) found += f.estimate.has_value();
      std::printf("%zu frames, %zu with a board, %zu tracks\n", s.sequence.frames.size(), found, s.tracks.size());
      if (s.report) {
        std::printf("max cv width %.4f height %.4f -> %s\n", s.report->max_cv_width, s.report->max_cv_height,
                    s.report->pass ? "consistent" : "inconsistent");
      }
      return 0;
    }
    if (*ab) {
      const auto base = load_config(ab_cfg, ab_over);
      base.validate(true);
      const auto manifest = load_dataset(base.dataset);
      const auto frames = load_frames(manifest, base.dataset.parent_path());
      const fs::path root = ab_over.out;
      auto variant = [&](const std::string& name, bool corner, augment::DepthMode depth) {
        auto c = base;
        c.corner_loss_enabled = corner;
        c.network.depth_mode = depth;
        c.output_dir = root / name;
        return std::make_pair(name, c);
      };
      const auto rows = train::run_ablation({variant("mask_only", false, augment::DepthMode::None),
                                             variant("corner_loss", true, augment::DepthMode::None),
                                             variant("depth_corner_loss", true, augment::DepthMode::Multiply)},
                                            frames, root / "ablation.csv");
      for (const auto& r : rows) {
        if (r.failed) {
          std::printf("%-18s failed: %s\n", r.name.c_str(), r.error.c_str());
        } else {
          std::printf("%-18s bbox %.3f segm %.3f mape %.3f\n", r.name.c_str(), r.metrics.bbox_map,
                      r.metrics.segm_map, r.metrics.hnw_mape);
        }
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
