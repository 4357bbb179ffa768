#include "evis/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "evis/random.hpp"

namespace evis::synth {

std::string class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::Disk: return "disk";
    case ShapeClass::Square: return "square";
    case ShapeClass::Triangle: return "triangle";
  }
  throw std::invalid_argument("unknown shape class");
}

ShapeClass class_from_name(const std::string& name) {
  if (name == "disk") return ShapeClass::Disk;
  if (name == "square") return ShapeClass::Square;
  if (name == "triangle") return ShapeClass::Triangle;
  throw std::invalid_argument("unknown shape class '" + name + "'");
}

void SceneConfig::validate() const {
  if (max_objects < 1) throw std::invalid_argument("scene config: max_objects must be >= 1");
  if (min_objects > max_objects) throw std::invalid_argument("scene config: min_objects > max_objects");
  if (frames_per_video < 1) throw std::invalid_argument("scene config: frames_per_video must be >= 1");
  if (shape_classes.empty()) throw std::invalid_argument("scene config: no shape classes");
  if (appear_disappear_prob < 0.0 || appear_disappear_prob > 1.0) {
    throw std::invalid_argument("scene config: appear_disappear_prob must be in [0, 1]");
  }
  if (color_jitter < 0.0 || color_jitter > 1.0) throw std::invalid_argument("scene config: color_jitter must be in [0, 1]");
  if (min_radius <= 0.0 || max_radius < min_radius) throw std::invalid_argument("scene config: bad radius range");
  if (velocity_range < 0.0) throw std::invalid_argument("scene config: velocity_range must be >= 0");
  const double room = static_cast<double>(std::min(frame_h, frame_w));
  if (2.0 * max_radius + 2.0 > room) {
    throw std::invalid_argument("scene config: frame " + std::to_string(frame_h) + "x" + std::to_string(frame_w) +
                                " too small for shapes of radius " + std::to_string(max_radius));
  }
}

nlohmann::ordered_json to_json(const SceneConfig& c) {
  nlohmann::ordered_json j;
  j["num_videos"] = c.num_videos;
  j["frames_per_video"] = c.frames_per_video;
  j["frame_h"] = c.frame_h;
  j["frame_w"] = c.frame_w;
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  std::vector<std::string> names;
  for (ShapeClass s : c.shape_classes) names.push_back(class_name(s));
  j["shape_classes"] = names;
  j["min_radius"] = c.min_radius;
  j["max_radius"] = c.max_radius;
  j["velocity_range"] = c.velocity_range;
  j["occlusion_allowed"] = c.occlusion_allowed;
  j["appear_disappear_prob"] = c.appear_disappear_prob;
  j["color_jitter"] = c.color_jitter;
  j["seed"] = c.seed;
  return j;
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.num_videos = j.value("num_videos", c.num_videos);
  c.frames_per_video = j.value("frames_per_video", c.frames_per_video);
  c.frame_h = j.value("frame_h", c.frame_h);
  c.frame_w = j.value("frame_w", c.frame_w);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  if (j.contains("shape_classes")) {
    c.shape_classes.clear();
    for (const auto& name : j["shape_classes"]) c.shape_classes.push_back(class_from_name(name.get<std::string>()));
  }
  c.min_radius = j.value("min_radius", c.min_radius);
  c.max_radius = j.value("max_radius", c.max_radius);
  c.velocity_range = j.value("velocity_range", c.velocity_range);
  c.occlusion_allowed = j.value("occlusion_allowed", c.occlusion_allowed);
  c.appear_disappear_prob = j.value("appear_disappear_prob", c.appear_disappear_prob);
  c.color_jitter = j.value("color_jitter", c.color_jitter);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

namespace {

// Position after reflecting off the walls lo and hi.
double bounce(double p, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double m = std::fmod(p - lo, 2.0 * span);
  if (m < 0.0) m += 2.0 * span;
  if (m > span) m = 2.0 * span - m;
  return lo + m;
}

bool inside(const ObjectTrack& o, double dx, double dy) {
  const double r = o.radius;
  switch (o.shape) {
    case ShapeClass::Disk: return dx * dx + dy * dy <= r * r;
    case ShapeClass::Square: return std::max(std::abs(dx), std::abs(dy)) <= 0.8 * r;
    case ShapeClass::Triangle: return dy >= -r && dy <= 0.7 * r && std::abs(dx) <= (dy + r) / 1.7;
  }
  return false;
}

bool trajectories_collide(const ObjectTrack& a, const ObjectTrack& b, std::size_t frames, std::size_t h,
                          std::size_t w) {
  for (std::size_t t = 0; t < frames; ++t) {
    if (!a.present(t) || !b.present(t)) continue;
    const auto ca = a.centre(t, h, w), cb = b.centre(t, h, w);
    if (std::hypot(ca[0] - cb[0], ca[1] - cb[1]) <= a.radius + b.radius + 1.0) return true;
  }
  return false;
}

}  // namespace

std::array<double, 2> ObjectTrack::centre(std::size_t t, std::size_t frame_h, std::size_t frame_w) const {
  const double td = static_cast<double>(t);
  return {bounce(x0 + vx * td, radius, static_cast<double>(frame_w) - radius),
          bounce(y0 + vy * td, radius, static_cast<double>(frame_h) - radius)};
}

int class_index(const SceneConfig& config, ShapeClass shape) {
  const auto it = std::find(config.shape_classes.begin(), config.shape_classes.end(), shape);
  if (it == config.shape_classes.end()) throw std::invalid_argument("shape class not in config: " + class_name(shape));
  return static_cast<int>(it - config.shape_classes.begin());
}

SceneState generate_scene(const SceneConfig& config, std::size_t video_index) {
  config.validate();
  Random rng(config.seed + video_index);
  SceneState scene;
  scene.frame_h = config.frame_h;
  scene.frame_w = config.frame_w;
  scene.num_frames = config.frames_per_video;
  const std::size_t frames = config.frames_per_video;
  const std::size_t count = config.min_objects + rng.index(config.max_objects - config.min_objects + 1);

  for (std::size_t k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      ObjectTrack o;
      o.shape = config.shape_classes[rng.index(config.shape_classes.size())];
      o.radius = rng.uniform(config.min_radius, config.max_radius);
      o.x0 = rng.uniform(o.radius, static_cast<double>(config.frame_w) - o.radius);
      o.y0 = rng.uniform(o.radius, static_cast<double>(config.frame_h) - o.radius);
      o.vx = rng.uniform(-config.velocity_range, config.velocity_range);
      o.vy = rng.uniform(-config.velocity_range, config.velocity_range);
      for (double& c : o.color) c = rng.uniform(0.3, 1.0);
      o.first_frame = 0;
      o.last_frame = frames - 1;
      if (frames > 1 && rng.bernoulli(config.appear_disappear_prob)) {
        // Absent for a prefix, a suffix, or both; always visible for at least
        // half of the video.
        const std::size_t cut = std::max<std::size_t>(1, frames / 4);
        const std::size_t mode = rng.index(3);
        if (mode != 1) o.first_frame = 1 + rng.index(cut);
        if (mode != 0) o.last_frame = frames - 2 - rng.index(cut);
        if (o.first_frame > o.last_frame) o.last_frame = o.first_frame;
      }
      o.jitter_seed = rng.next();
      o.color_jitter = config.color_jitter;
      bool ok = true;
      if (!config.occlusion_allowed) {
        for (const ObjectTrack& other : scene.objects) {
          if (trajectories_collide(o, other, frames, config.frame_h, config.frame_w)) {
            ok = false;
            break;
          }
        }
      }
      if (ok) {
        scene.objects.push_back(o);
        break;
      }
    }
  }
  return scene;
}

RenderedFrame render_frame(const SceneState& scene, std::size_t t) {
  if (t >= scene.num_frames) throw std::out_of_range("render_frame: frame index out of range");
  const std::size_t h = scene.frame_h, w = scene.frame_w;
  RenderedFrame out;
  out.rgb.assign(h * w * 3, 0);
  out.ids.assign(h * w, 0);
  const std::array<std::uint8_t, 3> background{20, 20, 26};
  for (std::size_t i = 0; i < h * w; ++i) {
    for (int c = 0; c < 3; ++c) out.rgb[i * 3 + c] = background[c];
  }
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const ObjectTrack& o = scene.objects[k];
    if (!o.present(t)) continue;
    const auto centre = o.centre(t, h, w);
    Random jitter(o.jitter_seed + 0x9E3779B97F4A7C15ULL * (t + 1));
    std::array<std::uint8_t, 3> color{};
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(o.color[c] + jitter.uniform(-1.0, 1.0) * o.color_jitter, 0.0, 1.0);
      color[c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    const auto x_lo = static_cast<std::size_t>(std::max(0.0, std::floor(centre[0] - o.radius - 1)));
    const auto x_hi = std::min(w, static_cast<std::size_t>(std::max(0.0, std::ceil(centre[0] + o.radius + 1))));
    const auto y_lo = static_cast<std::size_t>(std::max(0.0, std::floor(centre[1] - o.radius - 1)));
    const auto y_hi = std::min(h, static_cast<std::size_t>(std::max(0.0, std::ceil(centre[1] + o.radius + 1))));
    for (std::size_t y = y_lo; y < y_hi; ++y) {
      for (std::size_t x = x_lo; x < x_hi; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - centre[0];
        const double dy = static_cast<double>(y) + 0.5 - centre[1];
        if (!inside(o, dx, dy)) continue;
        out.ids[y * w + x] = static_cast<std::uint8_t>(k + 1);
        for (int c = 0; c < 3; ++c) out.rgb[(y * w + x) * 3 + c] = color[c];
      }
    }
  }
  return out;
}

Video render_video(const SceneState& scene) {
  if (scene.objects.size() > 254) throw std::invalid_argument("render_video: too many objects for 8-bit id maps");
  Video v;
  v.height = scene.frame_h;
  v.width = scene.frame_w;
  for (std::size_t t = 0; t < scene.num_frames; ++t) {
    RenderedFrame f = render_frame(scene, t);
    v.frames.push_back(std::move(f.rgb));
    v.id_maps.push_back(std::move(f.ids));
  }
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    v.instances.push_back({static_cast<int>(k), scene.objects[k].shape});
  }
  return v;
}

Dataset generate_dataset(const SceneConfig& config) {
  config.validate();
  Dataset d;
  d.config = config;
  for (std::size_t i = 0; i < config.num_videos; ++i) d.videos.push_back(render_video(generate_scene(config, i)));
  return d;
}

bool Tracklet::ever_visible() const {
  return std::any_of(class_per_frame.begin(), class_per_frame.end(), [](int c) { return c != kNoObject; });
}

std::vector<Tracklet> extract_ground_truth(const Video& video, const SceneConfig& config) {
  const std::size_t h = video.height, w = video.width, frames = video.num_frames();
  std::vector<Tracklet> out;
  for (std::size_t k = 0; k < video.instances.size(); ++k) {
    Tracklet tr;
    tr.instance_id = video.instances[k].instance_id;
    const int cls = class_index(config, video.instances[k].shape);
    const auto label = static_cast<std::uint8_t>(k + 1);
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<std::uint8_t> mask(h * w, 0);
      std::size_t x1 = w, y1 = h, x2 = 0, y2 = 0;
      bool any = false;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          if (video.id_maps[t][y * w + x] != label) continue;
          mask[y * w + x] = 1;
          any = true;
          x1 = std::min(x1, x);
          y1 = std::min(y1, y);
          x2 = std::max(x2, x + 1);
          y2 = std::max(y2, y + 1);
        }
      }
      tr.class_per_frame.push_back(any ? cls : kNoObject);
      if (any) {
        tr.box_per_frame.push_back({double(x1), double(y1), double(x2), double(y2)});
      } else {
        tr.box_per_frame.push_back({0.0, 0.0, 0.0, 0.0});
      }
      tr.mask_per_frame.push_back(std::move(mask));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

Video subsample(const Video& video, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("subsample: stride must be >= 1");
  Video v;
  v.height = video.height;
  v.width = video.width;
  v.instances = video.instances;
  for (std::size_t t = 0; t < video.num_frames(); t += stride) {
    v.frames.push_back(video.frames[t]);
    v.id_maps.push_back(video.id_maps[t]);
  }
  return v;
}

std::vector<Tracklet> subsample(const std::vector<Tracklet>& tracklets, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("subsample: stride must be >= 1");
  std::vector<Tracklet> out;
  for (const Tracklet& tr : tracklets) {
    Tracklet s;
    s.instance_id = tr.instance_id;
    for (std::size_t t = 0; t < tr.class_per_frame.size(); t += stride) {
      s.class_per_frame.push_back(tr.class_per_frame[t]);
      s.box_per_frame.push_back(tr.box_per_frame[t]);
      s.mask_per_frame.push_back(tr.mask_per_frame[t]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

Video clip(const Video& video, std::size_t start, std::size_t length) {
  if (start + length > video.num_frames()) throw std::out_of_range("clip: frame range out of bounds");
  Video v;
  v.height = video.height;
  v.width = video.width;
  v.instances = video.instances;
  v.frames.assign(video.frames.begin() + start, video.frames.begin() + start + length);
  v.id_maps.assign(video.id_maps.begin() + start, video.id_maps.begin() + start + length);
  return v;
}

Tensor frames_tensor(const Video& video, std::size_t start, std::size_t length) {
  if (start + length > video.num_frames()) throw std::out_of_range("frames_tensor: frame range out of bounds");
  const std::size_t per = video.height * video.width * 3;
  std::vector<double> v(length * per);
  for (std::size_t t = 0; t < length; ++t) {
    const auto& f = video.frames[start + t];
    for (std::size_t i = 0; i < per; ++i) v[t * per + i] = f[i] / 255.0;
  }
  return Tensor({length, video.height, video.width, 3}, std::move(v));
}

// ---- storage ----------------------------------------------------------------

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t h, std::size_t w,
                  const std::vector<std::uint8_t>& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << magic << "\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::string frame_name(std::size_t video, std::size_t t, const char* ext) {
  return "v" + std::to_string(video) + "_f" + std::to_string(t) + ext;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != h * w * 3) throw std::invalid_argument("write_ppm: buffer size mismatch");
  write_netpbm(path, "P6", h, w, rgb);
}

void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != h * w) throw std::invalid_argument("write_pgm: buffer size mismatch");
  write_netpbm(path, "P5", h, w, gray);
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, std::size_t h, std::size_t w,
                                      std::size_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing image file " + path.string());
  const std::string header = std::string(channels == 3 ? "P6" : "P5") + "\n" + std::to_string(w) + " " +
                             std::to_string(h) + "\n255\n";
  const std::size_t expected = header.size() + h * w * channels;
  is.seekg(0, std::ios::end);
  const auto actual = static_cast<std::size_t>(is.tellg());
  if (actual != expected) {
    throw std::runtime_error("image file " + path.string() + " has " + std::to_string(actual) + " bytes, expected " +
                             std::to_string(expected));
  }
  is.seekg(0);
  std::string got(header.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (got != header) throw std::runtime_error("image file " + path.string() + " has an unexpected header");
  std::vector<std::uint8_t> data(h * w * channels);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!is) throw std::runtime_error("short read from " + path.string());
  return data;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "ids");
  nlohmann::ordered_json manifest;
  manifest["format"] = "evis-synthvideo-1";
  manifest["config"] = to_json(dataset.config);
  manifest["videos"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < dataset.videos.size(); ++i) {
    const Video& v = dataset.videos[i];
    nlohmann::ordered_json jv;
    jv["index"] = i;
    jv["num_frames"] = v.num_frames();
    jv["height"] = v.height;
    jv["width"] = v.width;
    jv["instances"] = nlohmann::ordered_json::array();
    for (const Instance& inst : v.instances) {
      jv["instances"].push_back({{"instance_id", inst.instance_id}, {"class", class_name(inst.shape)}});
    }
    jv["tracklets"] = nlohmann::ordered_json::array();
    for (const Tracklet& tr : extract_ground_truth(v, dataset.config)) {
      nlohmann::ordered_json jt;
      jt["instance_id"] = tr.instance_id;
      jt["class_per_frame"] = nlohmann::ordered_json::array();
      jt["box_per_frame"] = nlohmann::ordered_json::array();
      for (std::size_t t = 0; t < tr.class_per_frame.size(); ++t) {
        if (tr.visible(t)) {
          jt["class_per_frame"].push_back(tr.class_per_frame[t]);
          jt["box_per_frame"].push_back(tr.box_per_frame[t]);
        } else {
          jt["class_per_frame"].push_back(nullptr);
          jt["box_per_frame"].push_back(nullptr);
        }
      }
      jv["tracklets"].push_back(std::move(jt));
    }
    manifest["videos"].push_back(std::move(jv));
    for (std::size_t t = 0; t < v.num_frames(); ++t) {
      write_ppm(dir / "frames" / frame_name(i, t, ".ppm"), v.height, v.width, v.frames[t]);
      write_pgm(dir / "ids" / frame_name(i, t, ".pgm"), v.height, v.width, v.id_maps[t]);
    }
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("dataset: missing manifest " + manifest_path.string());
  const auto manifest = nlohmann::json::parse(is);
  Dataset d;
  d.config = scene_config_from_json(manifest.at("config"));
  for (const auto& jv : manifest.at("videos")) {
    const std::size_t i = jv.at("index"), frames = jv.at("num_frames");
    Video v;
    v.height = jv.at("height");
    v.width = jv.at("width");
    for (const auto& ji : jv.at("instances")) {
      v.instances.push_back({ji.at("instance_id").get<int>(), class_from_name(ji.at("class").get<std::string>())});
    }
    for (std::size_t t = 0; t < frames; ++t) {
      v.frames.push_back(read_netpbm(dir / "frames" / frame_name(i, t, ".ppm"), v.height, v.width, 3));
      v.id_maps.push_back(read_netpbm(dir / "ids" / frame_name(i, t, ".pgm"), v.height, v.width, 1));
    }
    // The manifest tracklets are redundant with the id maps; a mismatch means
    // the files were edited independently.
    const auto gts = extract_ground_truth(v, d.config);
    const auto& jts = jv.at("tracklets");
    if (jts.size() != gts.size()) throw std::runtime_error("dataset: tracklet count mismatch in video " + std::to_string(i));
    for (std::size_t k = 0; k < gts.size(); ++k) {
      for (std::size_t t = 0; t < frames; ++t) {
        const auto& jc = jts[k].at("class_per_frame")[t];
        const int c = jc.is_null() ? kNoObject : jc.get<int>();
        if (c != gts[k].class_per_frame[t]) {
          throw std::runtime_error("dataset: manifest labels disagree with id map " +
                                   (dir / "ids" / frame_name(i, t, ".pgm")).string());
        }
      }
    }
    d.videos.push_back(std::move(v));
  }
  return d;
}

}  // namespace evis::synth
