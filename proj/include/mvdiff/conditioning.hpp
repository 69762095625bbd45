#pragma once

// Turns images and cameras into denoiser inputs. Target cameras are expressed
// in a frame rotated about world +z so that the source camera sits at
// azimuth 0; both the ray maps and the relative pose vector are therefore
// functions of the source/target relation only.

#include <cmath>
#include <vector>

#include "mvdiff/geometry.hpp"
#include "mvdiff/image.hpp"
#include "mvdiff/nn/denoiser.hpp"

namespace mvdiff {

template <class T>
nn::Mat<T> image_to_latent(const Image& img) {
  nn::Mat<T> z(img.channels, static_cast<Eigen::Index>(img.height) * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        z(c, static_cast<Eigen::Index>(y) * img.width + x) = static_cast<T>(2.0 * img.at(y, x, c) - 1.0);
  return z;
}

template <class T>
Image latent_to_image(const nn::Mat<T>& z, int height, int width, Eigen::Index first_site = 0) {
  Image img(height, width, static_cast<int>(z.rows()));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c)
        img.at(y, x, c) = 0.5 * (static_cast<double>(z(c, first_site + static_cast<Eigen::Index>(y) * width + x)) + 1.0);
  return img;
}

struct SphericalCoords {
  double elevation, azimuth, distance;
};

inline SphericalCoords spherical(const Camera& cam) {
  const Vec3 c = cam.center();
  const double r = c.norm();
  return {std::asin(std::clamp(c.z() / r, -1.0, 1.0)), std::atan2(c.y(), c.x()), r};
}

/// Same camera after rotating the world by `angle` about +z.
inline Camera rotate_world_z(const Camera& cam, double angle) {
  Camera out = cam;
  out.R = cam.R * Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix().transpose();
  return out;
}

/// Target camera in the source-canonical frame.
inline Camera relative_camera(const Camera& source, const Camera& target) {
  return rotate_world_z(target, -spherical(source).azimuth);
}

/// (dθ, sin dφ, cos dφ, dz) of the target relative to the source.
inline Eigen::Vector4d relative_pose(const Camera& source, const Camera& target) {
  const auto s = spherical(source), t = spherical(target);
  const double dphi = t.azimuth - s.azimuth;
  return {t.elevation - s.elevation, std::sin(dphi), std::cos(dphi), t.distance - s.distance};
}

inline FourierConfig network_fourier(const nn::NetworkConfig& cfg) {
  return FourierConfig::for_grid(cfg.fourier_bands, cfg.image_size, cfg.image_size);
}

/// Ray embedding of `cam` at pyramid level `level`, as ray_dim × sites.
template <class T>
nn::Mat<T> ray_features(const Camera& cam, int level, const FourierConfig& fourier) {
  const RayMap map = ray_map(cam.downscaled(1 << level), fourier);
  nn::Mat<T> out(map.embed_dim, static_cast<Eigen::Index>(map.width) * map.height);
  for (Eigen::Index s = 0; s < out.cols(); ++s)
    for (int k = 0; k < map.embed_dim; ++k) out(k, s) = static_cast<T>(map.embedded[s * map.embed_dim + k]);
  return out;
}

/// Conditioning for one instance: a source view and the cameras of its targets.
struct InstanceCondition {
  const Image* source = nullptr;
  Camera source_camera;
  std::vector<Camera> targets;
  bool drop = false;  // null conditioning: zero source, zero pose/rays
};

/// Assembles everything but the noisy latent and timesteps.
template <class T>
nn::DenoiserInput<T> make_denoiser_input(const nn::NetworkConfig& cfg, const std::vector<InstanceCondition>& items) {
  nn::require(!items.empty(), "conditioning: no instances");
  const int views = static_cast<int>(items.front().targets.size());
  nn::require(views >= 1, "conditioning: no target cameras");
  const int S = cfg.image_size;
  const int per = S * S;
  nn::DenoiserInput<T> in;
  in.instances = static_cast<int>(items.size());
  in.views = views;
  in.source = nn::FeatureMap<T>(nn::Grid{in.instances, S, S}, cfg.image_channels);
  in.noisy = nn::FeatureMap<T>(nn::Grid{in.images(), S, S}, cfg.image_channels);
  in.timesteps.assign(in.instances, 1);
  const FourierConfig fourier = network_fourier(cfg);
  if (cfg.mode == nn::ConditioningMode::pose_token) in.pose = nn::Mat<T>::Zero(nn::NetworkConfig::pose_dim, in.images());
  if (cfg.uses_rays()) {
    for (int l = 0; l < cfg.levels(); ++l)
      in.rays.emplace_back(nn::Grid{in.images(), cfg.level_size(l), cfg.level_size(l)}, cfg.ray_dim());
  }
  for (int b = 0; b < in.instances; ++b) {
    const auto& item = items[b];
    nn::require(static_cast<int>(item.targets.size()) == views, "conditioning: instances need equal view counts");
    nn::require(item.source && item.source->height == S && item.source->width == S &&
                    item.source->channels == cfg.image_channels,
                "conditioning: source image does not match the network resolution");
    if (item.drop) continue;
    in.source.data.middleCols(static_cast<Eigen::Index>(b) * per, per) = image_to_latent<T>(*item.source);
    for (int i = 0; i < views; ++i) {
      const int n = b * views + i;
      const Camera& tgt = item.targets[i];
      nn::require(tgt.width == S && tgt.height == S, "conditioning: target camera resolution mismatch");
      if (cfg.mode == nn::ConditioningMode::pose_token) {
        in.pose.col(n) = relative_pose(item.source_camera, tgt).cast<T>();
      } else {
        const Camera rel = relative_camera(item.source_camera, tgt);
        for (int l = 0; l < cfg.levels(); ++l) {
          const int lp = cfg.level_size(l) * cfg.level_size(l);
          in.rays[l].data.middleCols(static_cast<Eigen::Index>(n) * lp, lp) = ray_features<T>(rel, l, fourier);
        }
      }
    }
  }
  return in;
}

}  // namespace mvdiff
