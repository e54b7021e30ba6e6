#include "pmode/video_cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <tuple>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pmode/data_model.hpp"
#include "pmode/train_eval.hpp"

namespace fs = std::filesystem;

namespace pmode::video {

std::vector<fs::path> list_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FrameResult infer_image(const net::PmodeNet& net, const cv::Mat& image, const cv::Mat& depth, int frame_index) {
  if (image.empty() || image.type() != CV_8UC3) throw ShapeError("expected a non-empty 8-bit 3-channel frame");
  const int S = net.config().input_size;
  cv::Mat input = image;
  if (image.rows != S || image.cols != S) {
    const bool shrink = image.rows > S || image.cols > S;
    cv::resize(image, input, cv::Size(S, S), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  }
  const auto dets = net::infer_frame(net, input, depth);

  FrameResult r;
  r.frame_index = frame_index;
  const int p = train::select_primary(dets);
  if (p < 0) return r;
  const auto& d = dets[p];
  FrameEstimate e;
  e.frame_index = frame_index;
  const Box& nb = d.candidate.box;
  e.box = {nb.x1 * image.cols, nb.y1 * image.rows, nb.x2 * image.cols, nb.y2 * image.rows};
  cv::resize(net::binary_mask(d, cv::Size(S, S)), e.mask, image.size(), 0, 0, cv::INTER_NEAREST);
  e.width_m = d.dims.width_m;
  e.height_m = d.dims.height_m;
  e.score = d.candidate.class_score;
  r.estimate = std::move(e);
  return r;
}

SequenceResult infer_sequence(const net::PmodeNet& net, const std::vector<fs::path>& files) {
  SequenceResult seq;
  std::optional<cv::Size> size;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const cv::Mat image = cv::imread(files[i].string(), cv::IMREAD_COLOR);
    if (image.empty()) {
      seq.warnings.push_back("skipping unreadable frame " + files[i].string());
      continue;
    }
    if (!size) size = image.size();
    if (image.size() != *size) {
      seq.warnings.push_back("skipping " + files[i].string() + ": size differs from the first frame");
      continue;
    }
    cv::Mat depth;
    if (net.config().depth_mode != augment::DepthMode::None) {
      fs::path dp = files[i];
      dp.replace_extension(".depth");
      if (fs::exists(dp)) {
        try {
          depth = read_depth_raster(dp);
        } catch (const Error& e) {
          seq.warnings.push_back("ignoring depth " + dp.string() + ": " + e.what());
        }
      }
    }
    FrameResult r = infer_image(net, image, depth, static_cast<int>(i));
    r.file = files[i];
    seq.frames.push_back(std::move(r));
  }
  return seq;
}

double coefficient_of_variation(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  if (sd == 0.0) return 0.0;
  if (mean == 0.0) return std::numeric_limits<double>::infinity();
  return sd / std::abs(mean);
}

namespace {

void update_cv(TrackEstimate& t) {
  std::vector<double> w, h;
  for (const auto& o : t.observations) {
    w.push_back(o.width_m);
    h.push_back(o.height_m);
  }
  t.cv_width = coefficient_of_variation(w);
  t.cv_height = coefficient_of_variation(h);
}

}  // namespace

std::vector<TrackEstimate> associate_tracks(const std::vector<std::vector<Observation>>& per_frame,
                                            double iou_threshold, std::vector<std::vector<int>>* assignment,
                                            double max_size_ratio) {
  auto similar_size = [&](const Box& a, const Box& b) {
    if (max_size_ratio <= 0.0) return true;
    auto ratio = [](double x, double y) { return std::max(x, y) / std::max(1e-9, std::min(x, y)); };
    return ratio(a.width(), b.width()) <= max_size_ratio && ratio(a.height(), b.height()) <= max_size_ratio;
  };
  std::vector<TrackEstimate> tracks;
  std::vector<std::vector<int>> ids(per_frame.size());
  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    const auto& cur = per_frame[f];
    ids[f].assign(cur.size(), -1);
    if (f > 0) {
      const auto& prev = per_frame[f - 1];
      std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
      for (std::size_t a = 0; a < prev.size(); ++a) {
        for (std::size_t b = 0; b < cur.size(); ++b) {
          const double iou = box_iou(prev[a].box, cur[b].box);
          if (iou >= iou_threshold && similar_size(prev[a].box, cur[b].box)) pairs.emplace_back(iou, a, b);
        }
      }
      // Highest IoU first; index order breaks ties so the result is order-stable.
      std::stable_sort(pairs.begin(), pairs.end(),
                       [](const auto& x, const auto& y) { return std::get<0>(x) > std::get<0>(y); });
      std::vector<bool> prev_used(prev.size(), false);
      for (const auto& [iou, a, b] : pairs) {
        if (prev_used[a] || ids[f][b] >= 0) continue;
        prev_used[a] = true;
        ids[f][b] = ids[f - 1][a];
      }
    }
    for (std::size_t b = 0; b < cur.size(); ++b) {
      if (ids[f][b] < 0) {
        ids[f][b] = static_cast<int>(tracks.size());
        tracks.push_back({});
        tracks.back().track_id = ids[f][b];
      }
      tracks[ids[f][b]].observations.push_back(cur[b]);
    }
  }
  for (auto& t : tracks) update_cv(t);
  if (assignment) *assignment = std::move(ids);
  return tracks;
}

ConsistencyReport semantic_consistency_report(const std::vector<TrackEstimate>& tracks, double threshold) {
  if (tracks.empty()) throw PreconditionError("consistency report needs at least one track");
  ConsistencyReport r;
  r.threshold = threshold;
  std::size_t scored = 0;
  for (const auto& t : tracks) {
    TrackConsistency c;
    c.track_id = t.track_id;
    c.observations = t.observations.size();
    c.cv_width = t.cv_width;
    c.cv_height = t.cv_height;
    c.excluded = c.observations < 2;
    if (c.excluded) {
      ++r.excluded;
    } else {
      ++scored;
      r.max_cv_width = std::max(r.max_cv_width, c.cv_width);
      r.max_cv_height = std::max(r.max_cv_height, c.cv_height);
      r.mean_cv_width += c.cv_width;
      r.mean_cv_height += c.cv_height;
    }
    r.tracks.push_back(c);
  }
  if (scored > 0) {
    r.mean_cv_width /= scored;
    r.mean_cv_height /= scored;
  }
  r.flagged = r.excluded > 0 || scored == 0;
  r.pass = scored > 0 && r.max_cv_width <= threshold && r.max_cv_height <= threshold;
  return r;
}

nlohmann::ordered_json consistency_report_to_json(const ConsistencyReport& r) {
  nlohmann::ordered_json j;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  j["pass"] = r.pass;
  j["threshold"] = r.threshold;
  j["max_cv_width"] = num(r.max_cv_width);
  j["max_cv_height"] = num(r.max_cv_height);
  j["mean_cv_width"] = num(r.mean_cv_width);
  j["mean_cv_height"] = num(r.mean_cv_height);
  j["excluded_tracks"] = r.excluded;
  j["flagged"] = r.flagged;
  auto& arr = j["tracks"] = nlohmann::ordered_json::array();
  for (const auto& t : r.tracks) {
    nlohmann::ordered_json o;
    o["track_id"] = t.track_id;
    o["observations"] = t.observations;
    o["cv_width"] = num(t.cv_width);
    o["cv_height"] = num(t.cv_height);
    o["excluded"] = t.excluded;
    arr.push_back(std::move(o));
  }
  return j;
}

std::string dimension_text(double width_m, double height_m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "W: %.2fm H: %.2fm", width_m, height_m);
  return buf;
}

cv::Mat render_overlay(const cv::Mat& frame, const std::vector<FrameEstimate>& estimates) {
  if (frame.type() != CV_8UC3) throw ShapeError("overlay expects an 8-bit 3-channel frame");
  cv::Mat out = frame.clone();
  const cv::Scalar color(40, 220, 40);
  for (const auto& e : estimates) {
    if (!e.mask.empty() && e.mask.size() == out.size()) {
      cv::Mat tinted;
      cv::addWeighted(out, 0.6, cv::Mat(out.size(), out.type(), color), 0.4, 0.0, tinted);
      tinted.copyTo(out, e.mask);
    }
    const cv::Point p1(static_cast<int>(std::lround(e.box.x1)), static_cast<int>(std::lround(e.box.y1)));
    const cv::Point p2(static_cast<int>(std::lround(e.box.x2)) - 1, static_cast<int>(std::lround(e.box.y2)) - 1);
    cv::rectangle(out, p1, p2, color, 1, cv::LINE_8);
    const int ty = p1.y > 12 ? p1.y - 3 : std::min(out.rows - 1, p2.y + 11);
    cv::putText(out, dimension_text(e.width_m, e.height_m), cv::Point(std::max(0, p1.x), ty),
                cv::FONT_HERSHEY_SIMPLEX, 0.35, color, 1, cv::LINE_8);
  }
  const int strip = std::min(kStatusStripHeight, out.rows);
  cv::Mat bar = out.rowRange(out.rows - strip, out.rows);
  bar.setTo(cv::Scalar(30, 30, 30));
  const std::string status = estimates.empty() ? "no board" : std::to_string(estimates.size()) + " board(s)";
  cv::putText(out, status, cv::Point(3, out.rows - 4), cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(230, 230, 230), 1,
              cv::LINE_8);
  return out;
}

std::string dims_csv(const SequenceResult& seq, const std::vector<std::vector<int>>& assignment) {
  std::string out = "frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score\n";
  char buf[256];
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    const auto& e = seq.frames[f].estimate;
    if (!e) continue;
    const int track = f < assignment.size() && !assignment[f].empty() ? assignment[f][0] : -1;
    std::snprintf(buf, sizeof buf, "%d,%d,%.3f,%.3f,%.3f,%.3f,%.4f,%.4f,%.6f\n", e->frame_index, track, e->box.x1,
                  e->box.y1, e->box.x2, e->box.y2, e->width_m, e->height_m, e->score);
    out += buf;
  }
  return out;
}

InferSummary run_infer(const InferOptions& opts) {
  const net::PmodeNet net = net::load_checkpoint(opts.checkpoint);
  return run_infer(net, opts);
}

InferSummary run_infer(const net::PmodeNet& net, const InferOptions& opts) {
  InferSummary s;
  const auto files = list_frames(opts.frames_dir);
  s.sequence = infer_sequence(net, files);
  if (files.empty()) s.sequence.warnings.insert(s.sequence.warnings.begin(), "no frames in " + opts.frames_dir.string());

  std::vector<std::vector<Observation>> per_frame;
  for (const auto& fr : s.sequence.frames) {
    per_frame.emplace_back();
    if (fr.estimate) per_frame.back().push_back({fr.frame_index, fr.estimate->box, fr.estimate->width_m, fr.estimate->height_m});
  }
  std::vector<std::vector<int>> assignment;
  s.tracks = associate_tracks(per_frame, opts.iou_threshold, &assignment, opts.max_size_ratio);
  if (!s.tracks.empty()) s.report = semantic_consistency_report(s.tracks, opts.cv_threshold);

  auto write_text = [](const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
  };
  if (!opts.csv.empty()) write_text(opts.csv, dims_csv(s.sequence, assignment));
  if (!opts.consistency.empty()) {
    nlohmann::ordered_json j;
    if (s.report) {
      j = consistency_report_to_json(*s.report);
    } else {
      j["pass"] = false;
      j["flagged"] = true;
      j["tracks"] = nlohmann::ordered_json::array();
    }
    write_text(opts.consistency, j.dump(2) + "\n");
  }
  if (!opts.overlay_dir.empty()) {
    fs::create_directories(opts.overlay_dir);
    for (const auto& fr : s.sequence.frames) {
      const cv::Mat image = cv::imread(fr.file.string(), cv::IMREAD_COLOR);
      std::vector<FrameEstimate> est;
      if (fr.estimate) est.push_back(*fr.estimate);
      const fs::path out = opts.overlay_dir / (fr.file.stem().string() + "_overlay.png");
      if (!cv::imwrite(out.string(), render_overlay(image, est))) throw IoError("cannot write " + out.string());
    }
  }
  return s;
}

}  // namespace pmode::video
