#pragma once

// Rendered scenarios shared by the metric tests and the acceptance runner.

#include <cmath>
#include <numbers>

#include "mvdiff/metrics.hpp"
#include "mvdiff/scene.hpp"

namespace mvdiff::testing {

/// A textured plate parallel to the x = 0 plane, offset toward camera a, seen
/// by two orbit cameras: camera a looks straight at it, camera b sits a few
/// degrees away along the orbit, so the plate shifts between the views.
struct PlanarPair {
  Camera cam_a, cam_b;
  Image a, b;
  double plane_depth = 0;  // depth of the plate's front face along a's axis
};

inline PlanarPair planar_pair(std::uint64_t seed, int size = 32) {
  Rng rng = make_rng(seed, {0x91a7e});
  Scene scene;
  Primitive plate;
  plate.shape = Shape::box;
  const double half = 0.35 + 0.2 * uniform01(rng);
  const double offset = 0.3 + 0.3 * uniform01(rng);
  plate.center = Vec3(offset, 0, 0);
  plate.size = Vec3(0.01, half, half);
  plate.texture = Texture::checker;
  plate.period = 0.25 + 0.2 * uniform01(rng);
  plate.color_a = Vec3(0.1 + 0.3 * uniform01(rng), 0.1 + 0.3 * uniform01(rng), 0.1 + 0.3 * uniform01(rng));
  plate.color_b = Vec3(0.6 + 0.4 * uniform01(rng), 0.6 + 0.4 * uniform01(rng), 0.6 + 0.4 * uniform01(rng));
  scene.primitives.push_back(plate);
  scene.background = Vec3::Constant(0.5 + 0.2 * uniform01(rng));
  const double deg = std::numbers::pi / 180;
  const double z = 2.4 + 0.6 * uniform01(rng);
  const double gap = (3 + 12 * uniform01(rng)) * deg * (uniform01(rng) < 0.5 ? -1 : 1);
  const double elev = (uniform01(rng) - 0.5) * 6 * deg;
  const Mat3 K = intrinsics_from_fov(0.9, size, size);
  PlanarPair p;
  p.cam_a = orbit_camera({0.0, 0.0, z}, K, size, size);
  p.cam_b = orbit_camera({elev, gap, z}, K, size, size);
  p.a = render(scene, p.cam_a);
  p.b = render(scene, p.cam_b);
  p.plane_depth = z - offset - 0.01;
  return p;
}

struct RectificationCheck {
  double raw = 0, rectified = 0, mismatched = 0;
};

/// Distances for one pair: unrectified, rectified (b onto a), and rectified
/// with the frames in the wrong order (a warped as if it were b).
inline RectificationCheck rectification_check(const PlanarPair& p, const FeatureExtractor& fx) {
  RectificationCheck r;
  r.raw = *pair_distance(p.a, p.b, p.cam_a, p.cam_b, fx, false);
  r.rectified = *pair_distance(p.a, p.b, p.cam_a, p.cam_b, fx, true, p.plane_depth);
  r.mismatched = *pair_distance(p.b, p.a, p.cam_a, p.cam_b, fx, true, p.plane_depth);
  return r;
}

}  // namespace mvdiff::testing
