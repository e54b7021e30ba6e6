#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "pmode/common.hpp"
#include "pmode/net_core.hpp"

namespace pmode::video {

/// The primary board found in one frame, in that frame's pixel coordinates.
struct FrameEstimate {
  int frame_index = 0;
  Box box;
  cv::Mat mask;  // CV_8U 0/1, frame size
  double width_m = 0.0;
  double height_m = 0.0;
  double score = 0.0;
};

struct FrameResult {
  int frame_index = 0;
  std::filesystem::path file;
  std::optional<FrameEstimate> estimate;
};

struct SequenceResult {
  std::vector<FrameResult> frames;  // readable frames only, in order
  std::vector<std::string> warnings;
};

/// Image files (png, jpg, jpeg, bmp) in a directory, sorted by name.
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir);

/// Runs the network on one BGR frame of any size and keeps the primary detection.
FrameResult infer_image(const net::PmodeNet& net, const cv::Mat& image, const cv::Mat& depth = {},
                        int frame_index = 0);

/// Frames that cannot be read, or whose size differs from the first readable frame,
/// are skipped with a warning. A sibling `<stem>.depth` raster is used when present.
SequenceResult infer_sequence(const net::PmodeNet& net, const std::vector<std::filesystem::path>& files);

struct Observation {
  int frame_index = 0;
  Box box;
  double width_m = 0.0;
  double height_m = 0.0;
};

struct TrackEstimate {
  int track_id = 0;
  std::vector<Observation> observations;
  double cv_width = 0.0;
  double cv_height = 0.0;
};

/// Sample standard deviation (n - 1) over the mean. 0 for fewer than two values.
double coefficient_of_variation(const std::vector<double>& values);

/// Greedy association between consecutive entries of `per_frame`: candidate pairs are
/// taken by descending IoU and join when IoU >= threshold and the box width and height
/// each change by at most `max_size_ratio` (<= 0 disables that gate). Unmatched
/// observations start new tracks; ids are assigned in order of appearance.
/// `assignment`, when given, receives the track id of every observation.
std::vector<TrackEstimate> associate_tracks(const std::vector<std::vector<Observation>>& per_frame,
                                            double iou_threshold = 0.3,
                                            std::vector<std::vector<int>>* assignment = nullptr,
                                            double max_size_ratio = 1.2);

struct TrackConsistency {
  int track_id = 0;
  std::size_t observations = 0;
  double cv_width = 0.0;
  double cv_height = 0.0;
  bool excluded = false;  // single observation
};

struct ConsistencyReport {
  std::vector<TrackConsistency> tracks;
  double max_cv_width = 0.0;
  double max_cv_height = 0.0;
  double mean_cv_width = 0.0;
  double mean_cv_height = 0.0;
  double threshold = 0.15;
  std::size_t excluded = 0;
  bool flagged = false;  // some tracks excluded, or none left to score
  bool pass = false;
};

/// Throws PreconditionError on an empty track list. Fails when no track has at
/// least two observations.
ConsistencyReport semantic_consistency_report(const std::vector<TrackEstimate>& tracks, double threshold = 0.15);
nlohmann::ordered_json consistency_report_to_json(const ConsistencyReport& r);

/// "W: 3.30m H: 1.23m"
std::string dimension_text(double width_m, double height_m);

inline constexpr int kStatusStripHeight = 14;

/// Mask tint, box and dimension text for each estimate, plus a status strip along
/// the bottom edge. Pixels above the strip are untouched when there are no estimates.
cv::Mat render_overlay(const cv::Mat& frame, const std::vector<FrameEstimate>& estimates);

/// Header `frame_index,track_id,x1,y1,x2,y2,width_m,height_m,score`.
std::string dims_csv(const SequenceResult& seq, const std::vector<std::vector<int>>& assignment);

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path frames_dir;
  std::filesystem::path overlay_dir;  // optional
  std::filesystem::path csv;          // optional
  std::filesystem::path consistency;  // optional, JSON report
  double iou_threshold = 0.3;
  double max_size_ratio = 1.2;
  double cv_threshold = 0.15;
};

struct InferSummary {
  SequenceResult sequence;
  std::vector<TrackEstimate> tracks;
  std::optional<ConsistencyReport> report;  // absent when nothing was detected
};

/// Loads the checkpoint, runs the sequence and writes the requested outputs.
InferSummary run_infer(const InferOptions& opts);
/// Same, with a network already in memory.
InferSummary run_infer(const net::PmodeNet& net, const InferOptions& opts);

}  // namespace pmode::video
