#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "evis/tensor.hpp"

// Synthetic moving-shape videos with exact per-frame instance masks.
namespace evis::synth {

enum class ShapeClass { Disk, Square, Triangle };

std::string class_name(ShapeClass c);
ShapeClass class_from_name(const std::string& name);

/// Label used for frames where an instance is not visible.
constexpr int kNoObject = -1;

struct SceneConfig {
  std::size_t num_videos = 8;
  std::size_t frames_per_video = 16;
  std::size_t frame_h = 64;
  std::size_t frame_w = 64;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::vector<ShapeClass> shape_classes{ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle};
  double min_radius = 6.0;
  double max_radius = 10.0;
  /// Per-axis speed is drawn from [-velocity_range, velocity_range].
  double velocity_range = 2.5;
  bool occlusion_allowed = true;
  /// Chance that an object is absent for a prefix or suffix of the video.
  double appear_disappear_prob = 0.3;
  /// Per-frame colour noise amplitude, in [0, 1] intensity units.
  double color_jitter = 0.04;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::ordered_json to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& j);

/// Motion and appearance of one object; everything needed to render it.
struct ObjectTrack {
  ShapeClass shape = ShapeClass::Disk;
  double radius = 0.0;
  double x0 = 0.0, y0 = 0.0;  // centre at frame 0
  double vx = 0.0, vy = 0.0;
  std::array<double, 3> color{};
  std::size_t first_frame = 0;  // visible range, inclusive
  std::size_t last_frame = 0;
  std::uint64_t jitter_seed = 0;
  double color_jitter = 0.0;

  /// Centre at frame t under constant velocity with elastic bounce.
  std::array<double, 2> centre(std::size_t t, std::size_t frame_h, std::size_t frame_w) const;
  bool present(std::size_t t) const { return t >= first_frame && t <= last_frame; }
};

struct SceneState {
  std::size_t frame_h = 0, frame_w = 0, num_frames = 0;
  /// Draw order: later objects are nearer and occlude earlier ones.
  std::vector<ObjectTrack> objects;
};

struct RenderedFrame {
  std::vector<std::uint8_t> rgb;  // H*W*3
  std::vector<std::uint8_t> ids;  // H*W, 0 background, k+1 object k
};

RenderedFrame render_frame(const SceneState& scene, std::size_t t);

struct Instance {
  int instance_id = 0;
  ShapeClass shape = ShapeClass::Disk;
  bool operator==(const Instance&) const = default;
};

struct Video {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<std::uint8_t>> frames;   // RGB
  std::vector<std::vector<std::uint8_t>> id_maps;  // value = instance index + 1
  std::vector<Instance> instances;

  std::size_t num_frames() const { return frames.size(); }
  bool operator==(const Video&) const = default;
};

struct Tracklet {
  int instance_id = 0;
  std::vector<int> class_per_frame;  // class index or kNoObject
  std::vector<std::array<double, 4>> box_per_frame;  // x1, y1, x2 (exclusive), y2; zeros when absent
  std::vector<std::vector<std::uint8_t>> mask_per_frame;  // H*W binary

  bool visible(std::size_t t) const { return class_per_frame[t] != kNoObject; }
  bool ever_visible() const;
  bool operator==(const Tracklet&) const = default;
};

struct Dataset {
  SceneConfig config;
  std::vector<Video> videos;
};

/// Class index of a shape within the configured class list.
int class_index(const SceneConfig& config, ShapeClass shape);

SceneState generate_scene(const SceneConfig& config, std::size_t video_index);
Video render_video(const SceneState& scene);
Dataset generate_dataset(const SceneConfig& config);

/// One tracklet per instance (including instances that are never visible),
/// derived from the id maps.
std::vector<Tracklet> extract_ground_truth(const Video& video, const SceneConfig& config);

Video subsample(const Video& video, std::size_t stride);
std::vector<Tracklet> subsample(const std::vector<Tracklet>& tracklets, std::size_t stride);
/// Frames [start, start + length).
Video clip(const Video& video, std::size_t start, std::size_t length);

/// RGB frames [start, start + length) as a [length, H, W, 3] tensor in [0, 1].
Tensor frames_tensor(const Video& video, std::size_t start, std::size_t length);

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Binary PPM (P6) / PGM (P5) helpers.
void write_ppm(const std::filesystem::path& path, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& rgb);
void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& gray);
/// Reads a P6 or P5 file; throws naming the file on a malformed or wrong-sized image.
std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                                      std::size_t channels);

}  // namespace evis::synth
