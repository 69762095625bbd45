#pragma once

// Pinhole cameras, per-pixel Plücker rays and their Fourier embedding, orbit
// trajectories, and plane-induced homographies for view rectification.
//
// Conventions: right-handed world with +z up. A camera maps world points to
// camera coordinates as X_cam = R * X_world + T and looks down its own +z axis
// (x right, y down). Continuous pixel coordinates put the centre of pixel
// (u, v) at (u + 0.5, v + 0.5).

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mvdiff/error.hpp"
#include "mvdiff/image.hpp"

namespace mvdiff {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Camera {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 T = Vec3::Zero();
  int width = 1;
  int height = 1;

  Vec3 center() const { return -R.transpose() * T; }
  /// Unit optical axis in world coordinates.
  Vec3 axis() const { return R.row(2).transpose(); }

  void validate() const {
    if (width < 1 || height < 1) throw InvalidCamera("camera: image size must be positive");
    if (!K.allFinite() || !R.allFinite() || !T.allFinite())
      throw InvalidCamera("camera: non-finite entries");
    if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(2, 2) == 0.0)
      throw InvalidCamera("camera: K must be upper triangular");
    if (!(K(0, 0) > 0.0) || !(K(1, 1) > 0.0))
      throw InvalidCamera("camera: K must have positive focal lengths");
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
        std::abs(R.determinant() - 1.0) > 1e-9)
      throw InvalidCamera("camera: R is not a rotation");
  }

  /// Projects a world point to continuous pixel coordinates.
  Eigen::Vector2d project(const Vec3& world) const {
    const Vec3 p = K * (R * world + T);
    return {p.x() / p.z(), p.y() / p.z()};
  }

  /// Same view at 1/factor resolution: pixel edges scale, so a coarse pixel
  /// centre sits at the centre of its factor×factor block of fine pixels.
  Camera downscaled(int factor) const {
    Camera c = *this;
    Mat3 S = Mat3::Identity();
    S(0, 0) = S(1, 1) = 1.0 / factor;
    c.K = S * K;
    c.width = std::max(1, width / factor);
    c.height = std::max(1, height / factor);
    return c;
  }
};

inline Mat3 make_intrinsics(double fx, double fy, double cx, double cy) {
  Mat3 K = Mat3::Identity();
  K(0, 0) = fx;
  K(1, 1) = fy;
  K(0, 2) = cx;
  K(1, 2) = cy;
  return K;
}

/// Intrinsics for a square image with the given horizontal field of view.
inline Mat3 intrinsics_from_fov(double fov_rad, int width, int height) {
  const double f = 0.5 * width / std::tan(0.5 * fov_rad);
  return make_intrinsics(f, f, 0.5 * width, 0.5 * height);
}

struct OrbitPose {
  double elevation = 0.0;  // θ, radians
  double azimuth = 0.0;    // φ, radians
  double distance = 1.0;   // z, world units

  void validate() const {
    if (!(distance > 0.0)) throw InvalidCamera("orbit pose: distance must be positive");
    if (std::abs(elevation) > std::numbers::pi / 2)
      throw InvalidCamera("orbit pose: elevation outside [-pi/2, pi/2]");
  }

  Vec3 center() const {
    return distance * Vec3(std::cos(elevation) * std::cos(azimuth),
                           std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
  }
  bool operator==(const OrbitPose&) const = default;
};

inline double wrap_azimuth(double phi) {
  const double two_pi = 2.0 * std::numbers::pi;
  phi = std::fmod(phi, two_pi);
  if (phi < 0) phi += two_pi;
  return phi;
}

struct PluckerRay {
  Vec3 moment = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  Eigen::Matrix<double, 6, 1> coords() const {
    Eigen::Matrix<double, 6, 1> r;
    r << moment, direction;
    return r;
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

/// Ray through continuous pixel coordinates (x, y). The direction is the
/// normalised difference between the back-projected point R^T(K^-1 (x,y,1) - T)
/// and the camera centre.
inline Ray camera_ray(const Camera& cam, double x, double y) {
  Eigen::FullPivLU<Mat3> lu(cam.K);
  if (!lu.isInvertible()) throw InvalidCamera("camera: singular intrinsics");
  const Vec3 cam_dir = lu.solve(Vec3(x, y, 1.0));
  Vec3 d = cam.R.transpose() * cam_dir;
  const double n = d.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw InvalidCamera("camera: degenerate pixel ray");
  return {cam.center(), d / n};
}

inline Ray pixel_ray(const Camera& cam, int u, int v) {
  return camera_ray(cam, u + 0.5, v + 0.5);
}

inline PluckerRay plucker_encode(const Vec3& origin, const Vec3& direction) {
  const double n = direction.norm();
  if (!(n > 0.0)) throw DegenerateRay("plucker_encode: zero-length direction");
  if (std::abs(n - 1.0) > 1e-6) throw DegenerateRay("plucker_encode: direction is not unit length");
  return {origin.cross(direction), direction};
}

struct FourierConfig {
  std::vector<double> frequencies;

  int bands() const { return static_cast<int>(frequencies.size()); }
  int output_dim(int input_dim = 6) const { return input_dim * (2 * bands() + 1); }

  /// `bands` frequencies linearly spaced from 1 to the Nyquist rate of a
  /// width×height pixel grid (half the larger side, in cycles per image).
  static FourierConfig for_grid(int bands, int width, int height) {
    if (bands < 1) throw ConfigError("fourier: bands must be >= 1");
    const double nyquist = std::max(1.0, 0.5 * std::max(width, height));
    FourierConfig cfg;
    cfg.frequencies.resize(bands);
    for (int k = 0; k < bands; ++k)
      cfg.frequencies[k] = bands == 1 ? 1.0 : 1.0 + (nyquist - 1.0) * k / (bands - 1);
    if (bands > 1 && !(nyquist > 1.0))
      throw ConfigError("fourier: grid too small for more than one band");
    return cfg;
  }

  void validate() const {
    if (frequencies.empty()) throw ConfigError("fourier: no bands");
    for (size_t k = 1; k < frequencies.size(); ++k)
      if (!(frequencies[k] > frequencies[k - 1]))
        throw ConfigError("fourier: frequencies must be strictly increasing");
  }
};

/// Element-wise r -> [r, sin(f_1 pi r), cos(f_1 pi r), ..., sin(f_K pi r), cos(f_K pi r)],
/// written into `out` (length cfg.output_dim(in.size())).
inline void fourier_embed_into(const double* in, int dim, const FourierConfig& cfg, double* out) {
  for (int i = 0; i < dim; ++i) out[i] = in[i];
  int o = dim;
  for (double f : cfg.frequencies) {
    for (int i = 0; i < dim; ++i) out[o + i] = std::sin(f * std::numbers::pi * in[i]);
    o += dim;
    for (int i = 0; i < dim; ++i) out[o + i] = std::cos(f * std::numbers::pi * in[i]);
    o += dim;
  }
}

inline std::vector<double> fourier_embed(const PluckerRay& ray, const FourierConfig& cfg) {
  const auto r = ray.coords();
  std::vector<double> out(cfg.output_dim(6));
  fourier_embed_into(r.data(), 6, cfg, out.data());
  return out;
}

struct RayMap {
  int width = 0;
  int height = 0;
  int embed_dim = 0;
  std::vector<PluckerRay> rays;   // row-major, one per pixel
  std::vector<double> embedded;   // height × width × embed_dim
  Camera camera;

  const PluckerRay& ray(int u, int v) const { return rays[static_cast<size_t>(v) * width + u]; }
  const double* embedding(int u, int v) const {
    return embedded.data() + (static_cast<size_t>(v) * width + u) * embed_dim;
  }
};

inline RayMap ray_map(const Camera& cam, const FourierConfig& cfg) {
  cam.validate();
  RayMap map;
  map.width = cam.width;
  map.height = cam.height;
  map.embed_dim = cfg.output_dim(6);
  map.camera = cam;
  map.rays.resize(static_cast<size_t>(cam.width) * cam.height);
  map.embedded.resize(map.rays.size() * map.embed_dim);
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      const Ray r = pixel_ray(cam, u, v);
      const size_t idx = static_cast<size_t>(v) * cam.width + u;
      map.rays[idx] = plucker_encode(r.origin, r.direction);
      const auto coords = map.rays[idx].coords();
      fourier_embed_into(coords.data(), 6, cfg, map.embedded.data() + idx * map.embed_dim);
    }
  }
  return map;
}

/// Look-at-origin camera on a sphere. World +z projected onto the image plane
/// points up in the image.
inline Camera orbit_camera(const OrbitPose& pose, const Mat3& K, int width, int height) {
  pose.validate();
  if (std::abs(std::cos(pose.elevation)) < 1e-12)
    throw InvalidCamera("orbit_camera: elevation at a pole, up vector is degenerate");
  const Vec3 c = pose.center();
  const Vec3 forward = (-c).normalized();
  const Vec3 right = forward.cross(Vec3::UnitZ()).normalized();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.K = K;
  cam.R.row(0) = right.transpose();
  cam.R.row(1) = down.transpose();
  cam.R.row(2) = forward.transpose();
  cam.T = -cam.R * c;
  cam.width = width;
  cam.height = height;
  cam.validate();
  return cam;
}

/// Angle between two camera centres as seen from the world origin.
inline double center_angle(const Camera& a, const Camera& b) {
  const Vec3 ca = a.center(), cb = b.center();
  return std::atan2(ca.cross(cb).norm(), ca.dot(cb));
}

/// Homography taking pixel coordinates of view b onto view a for points on the
/// plane fronto-parallel to camera a at depth `plane_depth` along a's optical
/// axis. For look-at-origin cameras, a depth equal to a's distance puts the
/// plane through the world origin. Normalised so H(2,2) = 1.
inline Mat3 rectifying_homography(const Camera& cam_a, const Camera& cam_b, double plane_depth) {
  if (!(plane_depth > 0.0)) throw SingularHomography("rectifying_homography: plane depth must be > 0");
  if (cam_a.K == cam_b.K && cam_a.R == cam_b.R && cam_a.T == cam_b.T) return Mat3::Identity();
  const Mat3 R_ba = cam_b.R * cam_a.R.transpose();
  const Vec3 t_ba = cam_b.T - R_ba * cam_a.T;
  const Vec3 n(0.0, 0.0, 1.0);
  const Mat3 G = R_ba + t_ba * n.transpose() / plane_depth;  // a-frame -> b-frame on the plane
  const double det = G.determinant();
  if (!(std::abs(det) > 1e-12)) throw SingularHomography("rectifying_homography: camera b lies on the plane");
  Eigen::FullPivLU<Mat3> lu_ka(cam_a.K), lu_kb(cam_b.K);
  if (!lu_ka.isInvertible() || !lu_kb.isInvertible())
    throw InvalidCamera("rectifying_homography: singular intrinsics");
  // H_{b->a} = K_a G^{-1} K_b^{-1}
  Mat3 H = cam_a.K * G.inverse() * lu_kb.inverse();
  if (!(std::abs(H(2, 2)) > 1e-12) || !H.allFinite())
    throw SingularHomography("rectifying_homography: cannot normalise");
  return H / H(2, 2);
}

inline Eigen::Vector2d apply_homography(const Mat3& H, const Eigen::Vector2d& p) {
  const Vec3 q = H * Vec3(p.x(), p.y(), 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

struct WarpResult {
  Image image;
  std::vector<std::uint8_t> mask;  // 1 where the sample came from inside the source

  std::uint8_t valid(int y, int x) const { return mask[static_cast<size_t>(y) * image.width + x]; }
  double coverage() const {
    if (mask.empty()) return 0.0;
    size_t n = 0;
    for (auto m : mask) n += m;
    return static_cast<double>(n) / mask.size();
  }
};

/// Backward warp: output pixel p samples the input at H^{-1} p with bilinear
/// interpolation. H maps input coordinates to output coordinates.
inline WarpResult warp_image(const Image& image, const Mat3& H, double background = 0.0) {
  Eigen::FullPivLU<Mat3> lu(H);
  if (!lu.isInvertible() || !H.allFinite()) throw SingularHomography("warp_image: H is not invertible");
  const Mat3 Hinv = lu.inverse();
  WarpResult out{Image(image.height, image.width, image.channels, background),
                 std::vector<std::uint8_t>(static_cast<size_t>(image.height) * image.width, 0)};
  constexpr double eps = 1e-9;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const Vec3 q = Hinv * Vec3(x + 0.5, y + 0.5, 1.0);
      if (!(q.z() > 0.0) && !(q.z() < 0.0)) continue;
      // back to index space, where sample i sits at i
      const double sx = q.x() / q.z() - 0.5;
      const double sy = q.y() / q.z() - 0.5;
      if (!(sx >= -eps && sy >= -eps && sx <= image.width - 1 + eps && sy <= image.height - 1 + eps))
        continue;
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, image.width - 1);
      const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, image.height - 1);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const int y1 = std::min(y0 + 1, image.height - 1);
      const double fx = std::clamp(sx - x0, 0.0, 1.0);
      const double fy = std::clamp(sy - y0, 0.0, 1.0);
      for (int c = 0; c < image.channels; ++c) {
        const double top = (1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
        const double bot = (1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
        out.image.at(y, x, c) = (1 - fy) * top + fy * bot;
      }
      out.mask[static_cast<size_t>(y) * image.width + x] = 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text serialisation: one view per line, `θ φ z fx fy cx cy W H`, angles in
// radians, '#' starts a comment.

struct CameraRecord {
  OrbitPose pose;
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;

  Camera camera() const {
    return orbit_camera(pose, make_intrinsics(fx, fy, cx, cy), width, height);
  }
  static CameraRecord from(const OrbitPose& pose, const Mat3& K, int width, int height) {
    return {pose, K(0, 0), K(1, 1), K(0, 2), K(1, 2), width, height};
  }
  bool operator==(const CameraRecord&) const = default;
};

inline std::string format_camera_line(const CameraRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.pose.elevation << ' ' << r.pose.azimuth << ' ' << r.pose.distance
     << ' ' << r.fx << ' ' << r.fy << ' ' << r.cx << ' ' << r.cy << ' ' << r.width << ' ' << r.height;
  return os.str();
}

inline std::vector<CameraRecord> parse_cameras(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<CameraRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    CameraRecord r;
    if (!(ls >> r.pose.elevation)) continue;  // blank or comment-only
    if (!(ls >> r.pose.azimuth >> r.pose.distance >> r.fx >> r.fy >> r.cx >> r.cy >> r.width >> r.height))
      throw IoError(origin, "line " + std::to_string(lineno) + ": expected 9 fields");
    std::string extra;
    if (ls >> extra) throw IoError(origin, "line " + std::to_string(lineno) + ": trailing field '" + extra + "'");
    out.push_back(r);
  }
  return out;
}

inline std::vector<CameraRecord> read_cameras(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open camera file");
  return parse_cameras(in, path);
}

inline void write_cameras(const std::string& path, const std::vector<CameraRecord>& cams,
                          const std::string& header = "") {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open camera file for writing");
  out << "# elevation azimuth distance fx fy cx cy width height\n";
  if (!header.empty()) out << "# " << header << '\n';
  for (const auto& c : cams) out << format_camera_line(c) << '\n';
  if (!out) throw IoError(path, "write failed");
}

}  // namespace mvdiff
