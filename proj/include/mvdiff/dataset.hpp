#pragma once

// On-disk multi-view datasets:
//   <root>/manifest.txt
//   <root>/<scene_id>/<view_idx>.png
//   <root>/<scene_id>/cameras.txt

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "mvdiff/config.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/geometry.hpp"
#include "mvdiff/image.hpp"
#include "mvdiff/random.hpp"
#include "mvdiff/scene.hpp"

namespace mvdiff {

struct Range {
  double lo = 0, hi = 0;
  double sample(Rng& rng) const { return lo + (hi - lo) * uniform01(rng); }
  bool operator==(const Range&) const = default;
};

struct DatasetManifest {
  static constexpr int current_version = 1;

  int format_version = current_version;
  int scenes = 8;
  int views = 8;
  int image_size = 32;
  Range elevation{-0.1, 0.6};  // radians
  Range azimuth{0.0, 2 * std::numbers::pi};
  Range distance{2.6, 3.0};
  double fov = 0.9;  // horizontal, radians
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (format_version != current_version)
      throw ConfigError("dataset: unsupported format version " + std::to_string(format_version));
    if (scenes < 1 || views < 1) throw ConfigError("dataset: scenes and views must be >= 1");
    if (image_size < 4) throw ConfigError("dataset: image_size must be >= 4");
    if (elevation.lo > elevation.hi || azimuth.lo > azimuth.hi || distance.lo > distance.hi)
      throw ConfigError("dataset: empty sampling range");
    if (std::abs(elevation.lo) >= std::numbers::pi / 2 || std::abs(elevation.hi) >= std::numbers::pi / 2)
      throw ConfigError("dataset: elevation must stay inside (-pi/2, pi/2)");
    if (!(distance.lo > 1.0)) throw ConfigError("dataset: cameras must stay outside the unit sphere");
    if (!(fov > 0 && fov < std::numbers::pi)) throw ConfigError("dataset: fov must be in (0, pi)");
    if (!(test_fraction >= 0 && test_fraction <= 1)) throw ConfigError("dataset: test_fraction must be in [0, 1]");
  }

  Mat3 intrinsics() const { return intrinsics_from_fov(fov, image_size, image_size); }

  std::uint64_t scene_seed(int index) const { return derive_seed(seed, {0xda7a, static_cast<std::uint64_t>(index)}); }

  void write(KeyValues& kv, const std::string& prefix = "") const {
    kv.set_value(prefix + "format_version", format_version);
    kv.set_value(prefix + "scenes", scenes);
    kv.set_value(prefix + "views", views);
    kv.set_value(prefix + "image_size", image_size);
    kv.set(prefix + "elevation", join_list(std::vector<double>{elevation.lo, elevation.hi}));
    kv.set(prefix + "azimuth", join_list(std::vector<double>{azimuth.lo, azimuth.hi}));
    kv.set(prefix + "distance", join_list(std::vector<double>{distance.lo, distance.hi}));
    kv.set_value(prefix + "fov", fov);
    kv.set_value(prefix + "test_fraction", test_fraction);
    kv.set_value(prefix + "seed", seed);
  }

  static DatasetManifest read(const KeyValues& kv, const std::string& prefix = "") {
    DatasetManifest m;
    auto range = [&](const std::string& key, Range fallback) {
      const auto v = kv.get_list<double>(prefix + key, {fallback.lo, fallback.hi});
      if (v.size() != 2) throw ConfigError("config: key '" + prefix + key + "' expects two numbers 'lo,hi'");
      return Range{v[0], v[1]};
    };
    m.format_version = kv.get_number<int>(prefix + "format_version", m.format_version);
    m.scenes = kv.get_number<int>(prefix + "scenes", m.scenes);
    m.views = kv.get_number<int>(prefix + "views", m.views);
    m.image_size = kv.get_number<int>(prefix + "image_size", m.image_size);
    m.elevation = range("elevation", m.elevation);
    m.azimuth = range("azimuth", m.azimuth);
    m.distance = range("distance", m.distance);
    m.fov = kv.get_number<double>(prefix + "fov", m.fov);
    m.test_fraction = kv.get_number<double>(prefix + "test_fraction", m.test_fraction);
    m.seed = kv.get_number<std::uint64_t>(prefix + "seed", m.seed);
    m.validate();
    return m;
  }

  bool operator==(const DatasetManifest&) const = default;
};

inline std::string scene_id(std::uint64_t scene_seed) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%016llx", static_cast<unsigned long long>(scene_seed));
  return buf;
}

/// Hash split: depends on the id alone, so it is stable across runs and
/// across datasets that share scenes.
inline bool is_test_scene(const std::string& id, double test_fraction) {
  const double u = static_cast<double>(mix64(hash_name(id)) >> 11) * 0x1.0p-53;
  return u < test_fraction;
}

/// Orbit poses of one scene's views, drawn from the manifest ranges.
inline std::vector<OrbitPose> sample_view_poses(const DatasetManifest& m, std::uint64_t scene_seed) {
  Rng rng = make_rng(scene_seed, {0x9053});
  std::vector<OrbitPose> poses(m.views);
  for (auto& p : poses) {
    p.elevation = m.elevation.sample(rng);
    p.azimuth = m.azimuth.sample(rng);
    p.distance = m.distance.sample(rng);
  }
  return poses;
}

/// Renders every (camera) with `threads` workers; output order follows input.
inline std::vector<Image> render_views(const Scene& scene, const std::vector<Camera>& cams, int threads = 1) {
  std::vector<Image> out(cams.size());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(cams.size())));
  if (threads == 1) {
    for (size_t i = 0; i < cams.size(); ++i) out[i] = render(scene, cams[i]);
    return out;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (size_t i = w; i < cams.size(); i += threads) out[i] = render(scene, cams[i]);
    });
  for (auto& t : pool) t.join();
  return out;
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
}

inline void write_manifest(const std::filesystem::path& root, const DatasetManifest& m) {
  KeyValues kv;
  m.write(kv);
  kv.save((root / "manifest.txt").string(), "multi-view dataset manifest");
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto kv = KeyValues::load((root / "manifest.txt").string());
  auto m = DatasetManifest::read(kv);
  kv.reject_unknown((root / "manifest.txt").string());
  return m;
}

struct SceneViews {
  std::string id;
  std::uint64_t seed = 0;
  bool test = false;
  std::vector<Image> images;
  std::vector<CameraRecord> cameras;

  Camera camera(int v) const { return cameras.at(v).camera(); }
  int views() const { return static_cast<int>(images.size()); }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SceneViews> scenes;

  std::vector<const SceneViews*> split(bool test) const {
    std::vector<const SceneViews*> out;
    for (const auto& s : scenes)
      if (s.test == test) out.push_back(&s);
    return out;
  }
};

/// Renders one scene's views in memory, quantised to 8 bits exactly as a
/// PNG round trip would leave them.
inline SceneViews render_scene_views(const DatasetManifest& m, int index, int threads = 1) {
  SceneViews sv;
  sv.seed = m.scene_seed(index);
  sv.id = scene_id(sv.seed);
  sv.test = is_test_scene(sv.id, m.test_fraction);
  const Mat3 K = m.intrinsics();
  std::vector<Camera> cams;
  for (const auto& p : sample_view_poses(m, sv.seed)) {
    sv.cameras.push_back(CameraRecord::from(p, K, m.image_size, m.image_size));
    cams.push_back(sv.cameras.back().camera());
  }
  for (auto& img : render_views(generate_scene(sv.seed), cams, threads)) sv.images.push_back(quantize(img));
  return sv;
}

/// The whole dataset in memory; identical to build_dataset followed by load_dataset.
inline Dataset render_dataset(const DatasetManifest& m, int threads = 1) {
  m.validate();
  Dataset ds;
  ds.manifest = m;
  for (int s = 0; s < m.scenes; ++s) ds.scenes.push_back(render_scene_views(m, s, threads));
  return ds;
}

/// Renders and stores the dataset; returns the scene ids in index order.
inline std::vector<std::string> build_dataset(const DatasetManifest& m, const std::filesystem::path& root,
                                              int threads = 1) {
  m.validate();
  ensure_directory(root);
  std::vector<std::string> ids;
  for (int s = 0; s < m.scenes; ++s) {
    const auto sv = render_scene_views(m, s, threads);
    const auto dir = root / sv.id;
    ensure_directory(dir);
    for (int v = 0; v < sv.views(); ++v) write_png((dir / (std::to_string(v) + ".png")).string(), sv.images[v]);
    write_cameras((dir / "cameras.txt").string(), sv.cameras, "scene seed " + std::to_string(sv.seed));
    ids.push_back(sv.id);
  }
  write_manifest(root, m);
  return ids;
}

inline Dataset load_dataset(const std::filesystem::path& root) {
  Dataset ds;
  ds.manifest = read_manifest(root);
  const auto& m = ds.manifest;
  for (int s = 0; s < m.scenes; ++s) {
    SceneViews sv;
    sv.seed = m.scene_seed(s);
    sv.id = scene_id(sv.seed);
    sv.test = is_test_scene(sv.id, m.test_fraction);
    const auto dir = root / sv.id;
    sv.cameras = read_cameras((dir / "cameras.txt").string());
    if (static_cast<int>(sv.cameras.size()) != m.views)
      throw IoError((dir / "cameras.txt").string(), "expected " + std::to_string(m.views) + " cameras, found " +
                                                         std::to_string(sv.cameras.size()));
    for (int v = 0; v < m.views; ++v) {
      const auto path = (dir / (std::to_string(v) + ".png")).string();
      Image img = read_png(path);
      if (img.width != sv.cameras[v].width || img.height != sv.cameras[v].height)
        throw IoError(path, "image size does not match its camera");
      sv.images.push_back(std::move(img));
    }
    ds.scenes.push_back(std::move(sv));
  }
  return ds;
}

}  // namespace mvdiff
