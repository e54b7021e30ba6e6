#include "pmode/synth_scene.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>

#include <opencv2/imgcodecs.hpp>

namespace pmode::synth {

namespace {

enum class ObjectKind { Board, Distractor, Occluder };

struct SceneObject {
  ObjectKind kind;
  const BoardSpec* spec;
  Quad quad;
  cv::Vec3d center_cam;
  cv::Vec3d axis_x;  // unit vector along board width, camera frame
  cv::Vec3d axis_y;  // unit vector along board height, camera frame
  cv::Vec3d normal;
};

double hash_unit(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  const std::uint64_t h = mix_seed(mix_seed(a, b), c);
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

cv::Vec3d hsv_to_bgr(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {255.0 * (b + m), 255.0 * (g + m), 255.0 * (r + m)};
}

SceneObject make_object(ObjectKind kind, const BoardSpec& spec, const CameraProfile& cam) {
  SceneObject o{kind, &spec, project_board(spec, cam), {}, {}, {}, {}};
  const auto corners = board_corners_camera(spec, cam);
  o.center_cam = (corners[0] + corners[2]) * 0.5;
  o.axis_x = cv::normalize(corners[1] - corners[0]);
  o.axis_y = cv::normalize(corners[3] - corners[0]);
  o.normal = cv::normalize(o.axis_x.cross(o.axis_y));
  return o;
}

cv::Vec3d board_texture(const BoardSpec& spec, double s, double t) {
  const std::uint64_t seed = spec.texture_seed;
  const double hue = hash_unit(seed, 1);
  const cv::Vec3d base = hsv_to_bgr(hue, 0.55 + 0.4 * hash_unit(seed, 2), 0.55 + 0.4 * hash_unit(seed, 3));
  const cv::Vec3d accent = hash_unit(seed, 4) < 0.5 ? cv::Vec3d(245, 245, 245) : cv::Vec3d(25, 25, 30);
  const double border = 0.05 * std::min(1.0, spec.height_m / spec.width_m) + 0.02;
  const double bs = border * std::min(spec.width_m, spec.height_m) / spec.width_m;
  const double bt = border * std::min(spec.width_m, spec.height_m) / spec.height_m;
  if (s < bs || s > 1.0 - bs || t < bt || t > 1.0 - bt) {
    return base * 0.45;
  }
  // Glyph-like blocks along one or two text rows.
  const int rows = hash_unit(seed, 5) < 0.5 ? 1 : 2;
  const double row_h = 0.5 / rows;
  const double ty = (t - 0.25) / row_h;
  if (ty >= 0.0 && ty < rows && s > 0.12 && s < 0.88) {
    const double within_row = ty - std::floor(ty);
    const int glyphs = 4 + static_cast<int>(hash_unit(seed, 6) * 8);
    const double gs = (s - 0.12) / 0.76 * glyphs;
    const int g = static_cast<int>(gs);
    const double within = gs - g;
    if (within > 0.15 && within < 0.85 && within_row > 0.2 && within_row < 0.8) {
      const int cell_x = static_cast<int>(within * 3.0);
      const int cell_y = static_cast<int>((within_row - 0.2) / 0.6 * 3.0);
      const auto gid = static_cast<std::uint64_t>(g + 31 * static_cast<int>(ty));
      if (hash_unit(seed, 100 + gid, static_cast<std::uint64_t>(cell_x * 3 + cell_y)) < 0.6) return accent;
    }
  }
  return base;
}

cv::Vec3d distractor_texture(const BoardSpec& spec, double s, double t) {
  const double frame = 0.06;
  if (s < frame || s > 1.0 - frame || t < frame || t > 1.0 - frame) return {200, 200, 205};
  const int panes = 1 + static_cast<int>(hash_unit(spec.texture_seed, 1) * 3);
  const double ps = s * panes;
  if (std::abs(ps - std::round(ps)) < 0.04 * panes) return {190, 190, 195};
  const double shade = 60.0 + 50.0 * t + 20.0 * hash_unit(spec.texture_seed, 2);
  return {shade + 40.0, shade + 20.0, shade};
}

cv::Vec3d occluder_texture(const BoardSpec& spec, double s, double) {
  const double v = 45.0 + 35.0 * hash_unit(spec.texture_seed, 1) + 25.0 * std::sin(s * std::numbers::pi);
  return {v * 0.8, v * 0.9, v};
}

cv::Vec3d background_color(std::uint64_t seed, int row, int col, int height) {
  const double hue = 0.05 + 0.1 * hash_unit(seed, 11);
  const cv::Vec3d wall = hsv_to_bgr(hue, 0.15 + 0.25 * hash_unit(seed, 12), 0.45 + 0.35 * hash_unit(seed, 13));
  const double ground_start = height * (0.78 + 0.1 * hash_unit(seed, 14));
  if (row >= ground_start) {
    const double n = hash_unit(seed, static_cast<std::uint64_t>(row / 3), static_cast<std::uint64_t>(col / 3));
    return cv::Vec3d(90, 92, 95) * (0.85 + 0.2 * n);
  }
  const auto cell = static_cast<std::uint64_t>((row / 12) * 4096 + col / 20);
  const double block = hash_unit(seed, 77, cell);
  const double fine = hash_unit(seed, static_cast<std::uint64_t>(row), static_cast<std::uint64_t>(col) + 1000003);
  return wall * (0.8 + 0.25 * block + 0.08 * fine);
}

bool quad_inside(const Quad& q, int width, int height) {
  for (const auto& p : q) {
    if (!(p.x >= 0.0 && p.x <= width && p.y >= 0.0 && p.y <= height)) return false;
  }
  return true;
}

Box quad_box(const Quad& q) { return bounding_box(Polygon(q.begin(), q.end())); }

}  // namespace

void CameraProfile::validate() const {
  if (!(focal_px > 0.0) || !std::isfinite(focal_px)) throw PreconditionError("focal_px must be positive");
  if (height < 1 || width < 1) throw PreconditionError("camera image size must be positive");
  if (!(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) {
    throw PreconditionError("principal point must lie inside the image");
  }
}

std::array<cv::Vec3d, 4> board_corners_world(const BoardSpec& board) {
  const double hw = 0.5 * board.width_m;
  const double hh = 0.5 * board.height_m;
  const double c = std::cos(board.yaw);
  const double s = std::sin(board.yaw);
  const std::array<cv::Vec2d, 4> local = {cv::Vec2d(-hw, -hh), cv::Vec2d(hw, -hh), cv::Vec2d(hw, hh),
                                          cv::Vec2d(-hw, hh)};
  std::array<cv::Vec3d, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = board.center + cv::Vec3d(c * local[i][0], local[i][1], -s * local[i][0]);
  }
  return out;
}

std::array<cv::Vec3d, 4> board_corners_camera(const BoardSpec& board, const CameraProfile& cam) {
  auto corners = board_corners_world(board);
  for (auto& p : corners) p = cam.pose.rotation * p + cam.pose.translation;
  return corners;
}

Quad project_board(const BoardSpec& board, const CameraProfile& cam) {
  const auto corners = board_corners_camera(board, cam);
  Quad q;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& p = corners[i];
    if (!(p[2] > 0.0)) throw GeometryError("board corner at or behind the camera plane");
    q[i] = {cam.focal_px * p[0] / p[2] + cam.cx, cam.focal_px * p[1] / p[2] + cam.cy};
  }
  return q;
}

RenderedFrame render_frame(const SceneSpec& scene) {
  if (scene.boards.empty()) throw PreconditionError("scene has no labelable board");
  scene.camera.validate();
  const auto& cam = scene.camera;
  for (const auto& b : scene.boards) {
    if (!(b.width_m > 0.0 && b.height_m > 0.0)) throw PreconditionError("board size must be positive");
  }

  std::vector<SceneObject> objects;
  for (const auto& b : scene.boards) objects.push_back(make_object(ObjectKind::Board, b, cam));
  for (const auto& b : scene.distractors) objects.push_back(make_object(ObjectKind::Distractor, b, cam));
  for (const auto& b : scene.occluders) objects.push_back(make_object(ObjectKind::Occluder, b, cam));

  const int H = cam.height;
  const int W = cam.width;
  RenderedFrame out;
  out.depth = cv::Mat(H, W, CV_32FC1, cv::Scalar(kFarPlaneDepth));
  out.owner = cv::Mat(H, W, CV_32SC1, cv::Scalar(-1));
  cv::Mat zbuf(H, W, CV_64FC1, cv::Scalar(std::numeric_limits<double>::infinity()));
  cv::Mat color(H, W, CV_64FC3);

  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) color.at<cv::Vec3d>(i, j) = background_color(scene.illumination_seed, i, j, H);
  }

  for (std::size_t oi = 0; oi < objects.size(); ++oi) {
    const auto& o = objects[oi];
    const cv::Mat cover = rasterize_polygon(Polygon(o.quad.begin(), o.quad.end()), H, W);
    const double nc = o.normal.dot(o.center_cam);
    for (int i = 0; i < H; ++i) {
      const auto* crow = cover.ptr<unsigned char>(i);
      for (int j = 0; j < W; ++j) {
        if (!crow[j]) continue;
        const cv::Vec3d ray((j + 0.5 - cam.cx) / cam.focal_px, (i + 0.5 - cam.cy) / cam.focal_px, 1.0);
        const double denom = o.normal.dot(ray);
        if (std::abs(denom) < 1e-12) continue;
        const double z = nc / denom;
        if (!(z > 0.0) || z >= zbuf.at<double>(i, j)) continue;
        zbuf.at<double>(i, j) = z;
        out.owner.at<int>(i, j) = static_cast<int>(oi);
        const cv::Vec3d local = ray * z - o.center_cam;
        const double s = local.dot(o.axis_x) / o.spec->width_m + 0.5;
        const double t = local.dot(o.axis_y) / o.spec->height_m + 0.5;
        switch (o.kind) {
          case ObjectKind::Board: color.at<cv::Vec3d>(i, j) = board_texture(*o.spec, s, t); break;
          case ObjectKind::Distractor: color.at<cv::Vec3d>(i, j) = distractor_texture(*o.spec, s, t); break;
          case ObjectKind::Occluder: color.at<cv::Vec3d>(i, j) = occluder_texture(*o.spec, s, t); break;
        }
      }
    }
  }

  const std::uint64_t ls = scene.illumination_seed;
  const double gain = 0.75 + 0.4 * hash_unit(ls, 21);
  const cv::Vec3d tint(0.95 + 0.1 * hash_unit(ls, 22), 0.95 + 0.1 * hash_unit(ls, 23), 0.95 + 0.1 * hash_unit(ls, 24));
  const double slope = 0.3 * (hash_unit(ls, 25) - 0.5);
  out.image = cv::Mat(H, W, CV_8UC3);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const double shade = gain * (1.0 + slope * (static_cast<double>(j) / W - 0.5));
      const double noise = 8.0 * (hash_unit(ls, static_cast<std::uint64_t>(i) * 4099 + j, 31) - 0.5);
      const cv::Vec3d c = color.at<cv::Vec3d>(i, j);
      auto& px = out.image.at<cv::Vec3b>(i, j);
      for (int ch = 0; ch < 3; ++ch) px[ch] = cv::saturate_cast<unsigned char>(c[ch] * shade * tint[ch] + noise);
      const double z = zbuf.at<double>(i, j);
      if (std::isfinite(z)) out.depth.at<float>(i, j) = static_cast<float>(z);
    }
  }
  return out;
}

std::vector<BoardVisibility> board_visibility(const SceneSpec& scene, const RenderedFrame& rendered) {
  const auto& cam = scene.camera;
  const int n_boards = static_cast<int>(scene.boards.size());
  const int first_occluder = n_boards + static_cast<int>(scene.distractors.size());
  std::vector<BoardVisibility> out(scene.boards.size());
  for (int b = 0; b < n_boards; ++b) {
    const Quad q = project_board(scene.boards[b], cam);
    auto& vis = out[b];
    vis.inside_frame = quad_inside(q, cam.width, cam.height);
    const cv::Mat cover = rasterize_polygon(Polygon(q.begin(), q.end()), cam.height, cam.width);
    for (int i = 0; i < cam.height; ++i) {
      const auto* crow = cover.ptr<unsigned char>(i);
      const auto* orow = rendered.owner.ptr<int>(i);
      for (int j = 0; j < cam.width; ++j) {
        if (!crow[j]) continue;
        const int owner = orow[j];
        if (owner == b) {
          ++vis.visible_pixels;
        } else if (owner >= first_occluder) {
          vis.behind_occluder = true;
        } else if (owner >= 0) {
          vis.hidden_by_object = true;
        }
      }
    }
  }
  return out;
}

int select_board(const SceneSpec& scene, const RenderedFrame& rendered, SelectionPolicy policy) {
  const auto vis = board_visibility(scene, rendered);
  int best = -1;
  double best_key = -std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < scene.boards.size(); ++b) {
    if (!vis[b].inside_frame || vis[b].hidden_by_object || vis[b].visible_pixels == 0) continue;
    double key = 0.0;
    if (policy == SelectionPolicy::RightMost) {
      const Quad q = project_board(scene.boards[b], scene.camera);
      for (const auto& p : q) key += 0.25 * p.x;
    } else {
      const auto c = board_corners_camera(scene.boards[b], scene.camera);
      key = -0.25 * (c[0][2] + c[1][2] + c[2][2] + c[3][2]);
    }
    if (key > best_key) {
      best_key = key;
      best = static_cast<int>(b);
    }
  }
  return best;
}

AnnotatedFrame analytic_label(const SceneSpec& scene, SelectionPolicy policy) {
  RenderedFrame rendered = render_frame(scene);
  const int chosen = select_board(scene, rendered, policy);
  if (chosen < 0) throw LabelingError("no fully visible board to label");
  const auto vis = board_visibility(scene, rendered);
  const auto& board = scene.boards[static_cast<std::size_t>(chosen)];
  const Quad q = project_board(board, scene.camera);
  AnnotatedFrame frame;
  frame.image = std::move(rendered.image);
  frame.depth = std::move(rendered.depth);
  frame.polygons.push_back(Polygon(q.begin(), q.end()));
  frame.labels.push_back({board.width_m, board.height_m});
  frame.occluded.push_back(vis[static_cast<std::size_t>(chosen)].behind_occluder);
  return frame;
}

std::vector<CameraProfile> default_camera_profiles() {
  std::vector<CameraProfile> out;
  const double base_focal = 200.0;
  const double scales[3] = {0.9, 1.0, 1.1};
  const double pitch[3] = {0.02, 0.0, -0.02};
  const char* ids[3] = {"cam-a", "cam-b", "cam-c"};
  for (int i = 0; i < 3; ++i) {
    CameraProfile p;
    p.id = ids[i];
    p.focal_px = base_focal * scales[i];
    p.width = 320;
    p.height = 180;
    p.cx = 160.0 + 2.0 * (i - 1);
    p.cy = 90.0;
    const double c = std::cos(pitch[i]);
    const double s = std::sin(pitch[i]);
    p.pose.rotation = cv::Matx33d(1, 0, 0, 0, c, -s, 0, s, c);
    out.push_back(p);
  }
  return out;
}

std::uint64_t frame_seed(std::uint64_t global_seed, std::uint64_t index) { return mix_seed(global_seed, index); }

std::size_t profile_for_frame(int frame_index, std::size_t profile_count, const GeneratorOptions& options) {
  if (profile_count == 0) throw PreconditionError("at least one camera profile is required");
  const auto idx = static_cast<std::size_t>(frame_index);
  if (options.single_profile_tracks) {
    return (idx / static_cast<std::size_t>(std::max(1, options.track_length))) % profile_count;
  }
  return idx % profile_count;
}

namespace {

CameraProfile camera_for_frame(int frame_index, double step, const std::vector<CameraProfile>& profiles,
                               const GeneratorOptions& options) {
  CameraProfile cam = profiles[profile_for_frame(frame_index, profiles.size(), options)];
  const int pos = frame_index % std::max(1, options.track_length);
  cam.pose.translation -= cam.pose.rotation * cv::Vec3d(pos * step, 0.0, 0.0);
  return cam;
}

bool boxes_overlap(const Box& a, const Box& b, double margin) {
  return a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2;
}

}  // namespace

SceneSpec sample_scene(std::uint64_t seed, int frame_index, const std::vector<CameraProfile>& profiles,
                       const GeneratorOptions& options) {
  if (profiles.empty()) throw PreconditionError("at least one camera profile is required");
  if (frame_index < 0) throw PreconditionError("frame_index must be >= 0");
  const int track_len = std::max(1, options.track_length);
  const int track = frame_index / track_len;
  const int track_start = track * track_len;
  std::mt19937_64 rng(frame_seed(seed, static_cast<std::uint64_t>(track)));
  auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };

  const double step = uni(options.step_min, options.step_max);
  std::vector<CameraProfile> cams;
  for (int k = 0; k < track_len; ++k) cams.push_back(camera_for_frame(track_start + k, step, profiles, options));

  auto fits_all = [&](const BoardSpec& b, double margin) {
    for (const auto& cam : cams) {
      const Quad q = project_board(b, cam);
      for (const auto& p : q) {
        if (!(p.x >= margin && p.x <= cam.width - margin && p.y >= margin && p.y <= cam.height - margin)) {
          return false;
        }
      }
    }
    return true;
  };

  SceneSpec scene;
  BoardSpec primary;
  bool placed = false;
  for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
    primary.width_m = quantize_real(uni(options.width_min, options.width_max));
    primary.height_m = quantize_real(uni(options.height_min, options.height_max));
    if (primary.height_m > primary.width_m) continue;
    const double z = uni(options.depth_min, options.depth_max);
    primary.yaw = uni(-options.max_yaw, options.max_yaw);
    primary.texture_seed = rng();
    const double half_span = z * 0.5 * cams[0].width / cams[0].focal_px;
    for (int tries = 0; tries < 8 && !placed; ++tries) {
      primary.center = cv::Vec3d(uni(-half_span, half_span) + 0.5 * step * (track_len - 1), uni(-2.5, 0.5), z);
      placed = fits_all(primary, 2.0);
    }
  }
  if (!placed) throw LabelingError("could not place a fully visible board; check generator bounds");
  scene.boards.push_back(primary);

  if (uni(0.0, 1.0) < options.second_board_rate) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      BoardSpec second;
      second.width_m = quantize_real(uni(options.width_min, std::min(options.width_max, 6.0)));
      second.height_m = quantize_real(uni(options.height_min, std::min(options.height_max, second.width_m)));
      second.yaw = uni(-options.max_yaw, options.max_yaw);
      second.texture_seed = rng();
      const bool left = uni(0.0, 1.0) < 0.6;
      const double dx = 0.5 * (primary.width_m + second.width_m) + uni(0.5, 3.0);
      second.center = cv::Vec3d(primary.center[0] + (left ? -dx : dx), uni(-2.5, 0.5),
                                primary.center[2] + uni(-0.5, 0.5));
      bool ok = true;
      for (const auto& cam : cams) {
        const auto corners = board_corners_camera(second, cam);
        for (const auto& c : corners) ok = ok && c[2] > 0.5;
        if (!ok) break;
        const Box a = quad_box(project_board(primary, cam));
        const Box b = quad_box(project_board(second, cam));
        if (boxes_overlap(a, b, 4.0)) ok = false;
        // The second board must never out-rank the primary under the labeling rule.
        const bool inside = quad_inside(project_board(second, cam), cam.width, cam.height);
        if (inside && (!left || options.policy == SelectionPolicy::NearestDepth)) ok = false;
      }
      if (ok) {
        scene.boards.push_back(second);
        break;
      }
    }
  }

  const int n_distractors = static_cast<int>(
      std::uniform_int_distribution<int>(options.min_distractors, options.max_distractors)(rng));
  for (int d = 0; d < n_distractors; ++d) {
    BoardSpec w;
    w.width_m = uni(0.8, 2.5);
    w.height_m = uni(1.0, 2.8);
    w.yaw = primary.yaw;
    w.texture_seed = rng();
    // On the facade plane, slightly behind the signage.
    const double along = uni(-8.0, 8.0);
    const cv::Vec3d axis(std::cos(primary.yaw), 0.0, -std::sin(primary.yaw));
    const cv::Vec3d behind(std::sin(primary.yaw), 0.0, std::cos(primary.yaw));
    w.center = primary.center + along * axis + 0.15 * behind;
    w.center[1] = uni(0.0, 2.5);
    bool ok = true;
    for (const auto& cam : cams) {
      for (const auto& c : board_corners_camera(w, cam)) ok = ok && c[2] > 0.5;
    }
    if (ok) scene.distractors.push_back(w);
  }

  if (uni(0.0, 1.0) < options.occlusion_rate) {
    BoardSpec pole;
    pole.width_m = uni(0.2, 0.45);
    pole.height_m = 8.0;
    pole.yaw = 0.0;
    pole.texture_seed = rng();
    const double zp = primary.center[2] - uni(1.0, 3.0);
    // Put the pole on the ray through a point of the primary board, mid-track.
    const double frac = uni(-0.35, 0.35);
    const double bx = primary.center[0] + frac * primary.width_m * std::cos(primary.yaw);
    const double cam_x = 0.5 * step * (track_len - 1);
    pole.center = cv::Vec3d(cam_x + (bx - cam_x) * zp / primary.center[2], 0.0, zp);
    scene.occluders.push_back(pole);
  }

  const int pos = frame_index - track_start;
  scene.camera = cams[static_cast<std::size_t>(pos)];
  scene.illumination_seed = frame_seed(seed ^ 0xA5A5A5A5ULL, static_cast<std::uint64_t>(frame_index));
  return scene;
}

GeneratedDataset generate_frames(int count, std::uint64_t seed, const std::vector<CameraProfile>& profiles,
                                 const std::filesystem::path& out_dir, const GeneratorOptions& options) {
  if (count < 1) throw PreconditionError("count must be >= 1");
  if (profiles.empty()) throw PreconditionError("at least one camera profile is required");
  for (const auto& p : profiles) p.validate();
  if (options.write_files) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
      throw IoError("cannot create output directory " + out_dir.string());
    }
  }

  GeneratedDataset out;
  std::string id;
  for (const auto& p : profiles) id += (id.empty() ? "" : "+") + p.id;
  out.manifest.camera_profile_id = id;
  const int track_len = std::max(1, options.track_length);
  for (int i = 0; i < count; ++i) {
    const SceneSpec scene = sample_scene(seed, i, profiles, options);
    AnnotatedFrame frame = analytic_label(scene, options.policy);
    frame.frame_index = i;
    frame.track_id = i / track_len;
    for (auto& poly : frame.polygons) {
      for (auto& p : poly) {
        p.x = std::clamp(quantize_real(p.x), 0.0, static_cast<double>(frame.width()));
        p.y = std::clamp(quantize_real(p.y), 0.0, static_cast<double>(frame.height()));
      }
    }
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%06d", i);
    FrameRecord rec{i, std::string(name) + ".png", frame.width(), frame.height(), i};
    if (options.write_files) {
      if (!cv::imwrite((out_dir / rec.file).string(), frame.image)) {
        throw IoError("cannot write " + (out_dir / rec.file).string());
      }
      write_depth_raster(out_dir / (std::string(name) + ".depth"), frame.depth);
    }
    for (std::size_t k = 0; k < frame.polygons.size(); ++k) {
      out.manifest.annotations.push_back({i, frame.polygons[k], frame.labels[k].width_m, frame.labels[k].height_m,
                                          static_cast<bool>(frame.occluded[k]), frame.track_id});
    }
    out.manifest.frames.push_back(std::move(rec));
    out.frames.push_back(std::move(frame));
  }
  out.manifest.validate();
  if (options.write_files) save_dataset(out.manifest, out_dir / "manifest.json");
  return out;
}

DatasetManifest generate_dataset(int count, std::uint64_t seed, const std::vector<CameraProfile>& profiles,
                                 const std::filesystem::path& out_dir, const GeneratorOptions& options) {
  return generate_frames(count, seed, profiles, out_dir, options).manifest;
}

}  // namespace pmode::synth
