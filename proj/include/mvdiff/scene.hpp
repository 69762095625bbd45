#pragma once

// Procedural toy scenes (textured spheres and boxes inside the unit sphere)
// and a one-ray-per-pixel renderer with Lambert shading from a fixed light.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mvdiff/geometry.hpp"
#include "mvdiff/image.hpp"
#include "mvdiff/random.hpp"

namespace mvdiff {

enum class Shape { sphere, box };
enum class Texture { flat, checker, stripes };

struct Primitive {
  Shape shape = Shape::sphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Constant(0.5);  // sphere: radius in x; box: half extents
  Texture texture = Texture::flat;
  double period = 0.25;
  int stripe_axis = 0;
  Vec3 color_a = Vec3::Constant(0.5);
  Vec3 color_b = Vec3::Constant(0.5);

  double bounding_radius() const {
    return center.norm() + (shape == Shape::sphere ? size.x() : size.norm());
  }

  Vec3 albedo(const Vec3& world) const {
    const Vec3 p = world - center;
    switch (texture) {
      case Texture::flat:
        return color_a;
      case Texture::checker: {
        const long k = static_cast<long>(std::floor(p.x() / period)) + static_cast<long>(std::floor(p.y() / period)) +
                       static_cast<long>(std::floor(p.z() / period));
        return (k & 1) ? color_b : color_a;
      }
      case Texture::stripes: {
        const long k = static_cast<long>(std::floor(p[stripe_axis] / period));
        return (k & 1) ? color_b : color_a;
      }
    }
    return color_a;
  }
};

struct Scene {
  std::vector<Primitive> primitives;
  Vec3 background = Vec3::Constant(1.0);
  std::uint64_t seed = 0;

  /// Coarse description used to tell generated scenes apart.
  std::string signature() const {
    std::ostringstream os;
    os << primitives.size();
    for (const auto& p : primitives)
      os << '|' << static_cast<int>(p.shape) << static_cast<int>(p.texture) << ':'
         << static_cast<int>(p.color_a.x() * 8) << static_cast<int>(p.color_a.y() * 8)
         << static_cast<int>(p.color_a.z() * 8);
    return os.str();
  }
};

namespace detail {

inline Vec3 random_color(Rng& rng) {
  return {0.1 + 0.85 * uniform01(rng), 0.1 + 0.85 * uniform01(rng), 0.1 + 0.85 * uniform01(rng)};
}

}  // namespace detail

/// 1-4 primitives with distinct texture types or colours; the first one is
/// always patterned so that views at different azimuths differ.
inline Scene generate_scene(std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x5ce9e});
  Scene s;
  s.seed = seed;
  const double g = 0.55 + 0.4 * uniform01(rng);
  s.background = Vec3(g, g, g) + 0.05 * Vec3(uniform01(rng), uniform01(rng), uniform01(rng));
  s.background = s.background.cwiseMin(1.0);
  const int count = static_cast<int>(uniform_int(rng, 1, 4));
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.shape = uniform01(rng) < 0.5 ? Shape::sphere : Shape::box;
    const double extent = count == 1 ? 0.45 + 0.2 * uniform01(rng) : 0.2 + 0.2 * uniform01(rng);
    if (p.shape == Shape::sphere) {
      p.size = Vec3::Constant(extent);
    } else {
      p.size = extent * Vec3(0.6 + 0.4 * uniform01(rng), 0.6 + 0.4 * uniform01(rng), 0.6 + 0.4 * uniform01(rng));
      p.size *= std::min(1.0, 0.9 / p.size.norm());
    }
    const double room = std::max(0.0, 0.98 - (p.shape == Shape::sphere ? p.size.x() : p.size.norm()));
    const double r = room * std::sqrt(uniform01(rng)) * (count == 1 ? 0.5 : 1.0);
    const double az = 2 * std::numbers::pi * uniform01(rng);
    const double el = (uniform01(rng) - 0.5) * 0.8;
    p.center = r * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const double pick = uniform01(rng);
    p.texture = i == 0 ? (pick < 0.5 ? Texture::checker : Texture::stripes)
                       : (pick < 0.4 ? Texture::flat : pick < 0.7 ? Texture::checker : Texture::stripes);
    p.period = 0.12 + 0.18 * uniform01(rng);
    p.stripe_axis = static_cast<int>(uniform_int(rng, 0, 1));  // x or y: never symmetric about +z
    p.color_a = detail::random_color(rng);
    p.color_b = detail::random_color(rng);
    if ((p.color_a - p.color_b).norm() < 0.4) p.color_b = Vec3::Constant(1.0) - p.color_a;
    s.primitives.push_back(p);
  }
  return s;
}

struct Hit {
  double t;
  Vec3 normal;
  const Primitive* prim;
};

inline std::optional<Hit> intersect(const Primitive& p, const Ray& ray) {
  constexpr double eps = 1e-9;
  if (p.shape == Shape::sphere) {
    const Vec3 oc = ray.origin - p.center;
    const double b = oc.dot(ray.direction);
    const double c = oc.squaredNorm() - p.size.x() * p.size.x();
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= eps) t = -b + sq;
    if (t <= eps) return std::nullopt;
    return Hit{t, (ray.origin + t * ray.direction - p.center) / p.size.x(), &p};
  }
  // slab test
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis0 = 0, axis1 = 0;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.size[a], hi = p.center[a] + p.size[a];
    if (std::abs(ray.direction[a]) < 1e-15) {
      if (ray.origin[a] < lo || ray.origin[a] > hi) return std::nullopt;
      continue;
    }
    double ta = (lo - ray.origin[a]) / ray.direction[a];
    double tb = (hi - ray.origin[a]) / ray.direction[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) t0 = ta, axis0 = a;
    if (tb < t1) t1 = tb, axis1 = a;
  }
  if (t0 > t1) return std::nullopt;
  double t = t0;
  int axis = axis0;
  if (t <= eps) t = t1, axis = axis1;
  if (t <= eps) return std::nullopt;
  Vec3 n = Vec3::Zero();
  const Vec3 hit = ray.origin + t * ray.direction;
  n[axis] = hit[axis] > p.center[axis] ? 1.0 : -1.0;
  return Hit{t, n, &p};
}

inline const Vec3& light_direction() {
  static const Vec3 l = Vec3(0.45, 0.3, 0.84).normalized();
  return l;
}

inline Vec3 shade_ray(const Scene& scene, const Ray& ray) {
  std::optional<Hit> best;
  for (const auto& p : scene.primitives) {
    auto h = intersect(p, ray);
    if (h && (!best || h->t < best->t)) best = h;
  }
  if (!best) return scene.background;
  const Vec3 point = ray.origin + best->t * ray.direction;
  const double lambert = std::max(0.0, best->normal.dot(light_direction()));
  return (best->prim->albedo(point) * (0.35 + 0.65 * lambert)).cwiseMin(1.0);
}

inline Image render(const Scene& scene, const Camera& cam) {
  cam.validate();
  Image img(cam.height, cam.width, 3);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      const Vec3 c = shade_ray(scene, pixel_ray(cam, u, v));
      for (int k = 0; k < 3; ++k) img.at(v, u, k) = c[k];
    }
  return img;
}

}  // namespace mvdiff
