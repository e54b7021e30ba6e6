#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pmode/common.hpp"
#include "pmode/data_model.hpp"

namespace pmode::synth {

/// World-to-camera rigid transform: p_cam = rotation * p_world + translation.
struct Pose {
  cv::Matx33d rotation = cv::Matx33d::eye();
  cv::Vec3d translation{0.0, 0.0, 0.0};
};

/// Pinhole camera. Image axes: x right, y down; camera looks along +Z.
struct CameraProfile {
  std::string id;
  double focal_px = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int height = 0;
  int width = 0;
  Pose pose;

  void validate() const;
};

/// Planar rectangle in world space. Local axes before yaw: x right, y down; yaw
/// rotates about the vertical axis.
struct BoardSpec {
  double width_m = 0.0;
  double height_m = 0.0;
  cv::Vec3d center{0.0, 0.0, 10.0};
  double yaw = 0.0;
  std::uint64_t texture_seed = 0;
};

struct SceneSpec {
  std::vector<BoardSpec> boards;       // labelable signage
  std::vector<BoardSpec> distractors;  // facade clutter, never labeled
  std::vector<BoardSpec> occluders;    // poles and the like; boards behind them stay labelable
  CameraProfile camera;
  std::uint64_t illumination_seed = 0;
};

/// Corner order is TL, TR, BR, BL.
using Quad = std::array<Point2, 4>;

enum class SelectionPolicy { RightMost, NearestDepth };

inline constexpr float kFarPlaneDepth = 100.0f;

std::array<cv::Vec3d, 4> board_corners_world(const BoardSpec& board);
std::array<cv::Vec3d, 4> board_corners_camera(const BoardSpec& board, const CameraProfile& cam);

/// Throws GeometryError if any corner is at or behind the camera plane.
Quad project_board(const BoardSpec& board, const CameraProfile& cam);

struct RenderedFrame {
  cv::Mat image;  // CV_8UC3
  cv::Mat depth;  // CV_32FC1; kFarPlaneDepth where no object is hit
  cv::Mat owner;  // CV_32SC1; -1 background, else index into the flattened object list
};

/// Flattened object order used by RenderedFrame::owner: boards, distractors, occluders.
RenderedFrame render_frame(const SceneSpec& scene);

struct BoardVisibility {
  bool inside_frame = false;
  bool hidden_by_object = false;  // another board or distractor covers part of it
  bool behind_occluder = false;
  int visible_pixels = 0;
};

std::vector<BoardVisibility> board_visibility(const SceneSpec& scene, const RenderedFrame& rendered);

/// Renders the scene and labels the single selected board. Throws LabelingError when
/// no board is fully visible.
AnnotatedFrame analytic_label(const SceneSpec& scene,
                              SelectionPolicy policy = SelectionPolicy::RightMost);

/// Index of the board analytic_label would pick, or -1.
int select_board(const SceneSpec& scene, const RenderedFrame& rendered, SelectionPolicy policy);

/// Three profiles with focal lengths 0.9x, 1x and 1.1x of a base, 320x180 frames.
std::vector<CameraProfile> default_camera_profiles();

struct GeneratorOptions {
  double occlusion_rate = 0.2;
  double width_min = 1.0;
  double width_max = 13.0;
  double height_min = 0.5;
  double height_max = 3.5;
  double depth_min = 9.0;
  double depth_max = 11.0;
  double max_yaw = 0.3;
  double second_board_rate = 0.25;
  int min_distractors = 1;
  int max_distractors = 3;
  int track_length = 3;
  // Lateral camera travel between consecutive frames of a track, meters.
  double step_min = 0.3;
  double step_max = 0.8;
  bool single_profile_tracks = false;
  SelectionPolicy policy = SelectionPolicy::RightMost;
  bool write_files = true;
};

std::uint64_t frame_seed(std::uint64_t global_seed, std::uint64_t index);

/// Profile used for frame `frame_index`: round-robin over profiles unless
/// single_profile_tracks, which gives every frame of a track the same camera.
std::size_t profile_for_frame(int frame_index, std::size_t profile_count,
                              const GeneratorOptions& options);

/// Scene for one frame. Frames of one track share a board layout and differ by
/// camera position.
SceneSpec sample_scene(std::uint64_t seed, int frame_index, const std::vector<CameraProfile>& profiles,
                       const GeneratorOptions& options);

struct GeneratedDataset {
  DatasetManifest manifest;
  std::vector<AnnotatedFrame> frames;  // in memory copies, same order as manifest.frames
};

GeneratedDataset generate_frames(int count, std::uint64_t seed,
                                 const std::vector<CameraProfile>& profiles,
                                 const std::filesystem::path& out_dir,
                                 const GeneratorOptions& options = {});

/// Writes `frame_XXXXXX.png`, `frame_XXXXXX.depth` and `manifest.json` to out_dir.
DatasetManifest generate_dataset(int count, std::uint64_t seed,
                                 const std::vector<CameraProfile>& profiles,
                                 const std::filesystem::path& out_dir,
                                 const GeneratorOptions& options = {});

}  // namespace pmode::synth
