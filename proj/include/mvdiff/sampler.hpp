#pragma once

// Joint multi-view sampling with classifier-free guidance, and orbit
// rendering in overlapping windows.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "mvdiff/conditioning.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/nn/denoiser.hpp"

namespace mvdiff {

enum class NoiseMode { shared, independent };

inline std::string to_string(NoiseMode m) { return m == NoiseMode::shared ? "shared" : "independent"; }

inline NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "shared") return NoiseMode::shared;
  if (s == "independent") return NoiseMode::independent;
  throw ConfigError("sample: unknown noise mode '" + s + "' (valid: shared, independent)");
}

inline SigmaMode parse_sigma_mode(const std::string& s) {
  if (s == "stochastic") return SigmaMode::stochastic;
  if (s == "deterministic") return SigmaMode::deterministic;
  throw ConfigError("sample: unknown sigma mode '" + s + "' (valid: stochastic, deterministic)");
}

struct SampleConfig {
  int steps = 50;
  double guidance = 3.0;
  NoiseMode noise = NoiseMode::shared;
  SigmaMode sigma = SigmaMode::deterministic;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    if (!(guidance >= 0)) throw ConfigError("sample: guidance scale must be >= 0");
  }

  void write(KeyValues& kv, const std::string& prefix = "sample.") const {
    kv.set_value(prefix + "steps", steps);
    kv.set_value(prefix + "guidance", guidance);
    kv.set(prefix + "noise", to_string(noise));
    kv.set(prefix + "sigma", to_string(sigma));
    kv.set_value(prefix + "seed", seed);
  }

  static SampleConfig read(const KeyValues& kv, const std::string& prefix = "sample.") {
    SampleConfig c;
    c.steps = kv.get_number(prefix + "steps", c.steps);
    c.guidance = kv.get_number(prefix + "guidance", c.guidance);
    c.noise = parse_noise_mode(kv.get(prefix + "noise", to_string(c.noise)));
    c.sigma = parse_sigma_mode(kv.get(prefix + "sigma", to_string(c.sigma)));
    c.seed = kv.get_number(prefix + "seed", c.seed);
    c.validate();
    return c;
  }
};

/// Called once per step with the guided prediction, before the update.
using StepHook = std::function<void(int t, const nn::Mat<float>& eps_hat)>;

struct SampleRequest {
  const Image* source = nullptr;
  Camera source_camera;
  std::vector<Camera> targets;
  // Noise stream id per target; defaults to the target index. Views with the
  // same id start from (and, when stochastic, are perturbed by) the same draws.
  std::vector<std::uint64_t> streams;
};

namespace detail {

inline nn::Mat<float> stream_noise(std::uint64_t seed, std::uint64_t tag, std::uint64_t stream, int t, int rows,
                                   int cols) {
  Rng rng = make_rng(seed, {tag, stream, static_cast<std::uint64_t>(t)});
  return standard_normal<float>(rows, cols, rng);
}

}  // namespace detail

/// Denoises all targets jointly from z_T down to z_0 and returns images in [0, 1].
inline std::vector<Image> sample_views(const nn::Parameters<float>& params, const SampleRequest& req,
                                       const SampleConfig& cfg, const StepHook& hook = {}) {
  cfg.validate();
  const auto& net_cfg = params.config;
  const int views = static_cast<int>(req.targets.size());
  if (views < 1) throw ConfigError("sample: no target cameras");
  if (!req.streams.empty() && static_cast<int>(req.streams.size()) != views)
    throw ConfigError("sample: one noise stream per target required");
  const auto sched = DiffusionSchedule::scaled_linear(cfg.steps, cfg.sigma);

  InstanceCondition cond{req.source, req.source_camera, req.targets, false};
  InstanceCondition uncond = cond;
  uncond.drop = true;
  auto in_c = make_denoiser_input<float>(net_cfg, {cond});
  auto in_u = make_denoiser_input<float>(net_cfg, {uncond});

  const int C = net_cfg.image_channels;
  const int per = net_cfg.image_size * net_cfg.image_size;
  auto stream = [&](int i) -> std::uint64_t {
    if (cfg.noise == NoiseMode::shared) return 0;
    return req.streams.empty() ? static_cast<std::uint64_t>(i) : req.streams[i];
  };
  auto draw = [&](std::uint64_t tag, int t) {
    nn::Mat<float> z(C, static_cast<Eigen::Index>(views) * per);
    for (int i = 0; i < views; ++i) z.middleCols(static_cast<Eigen::Index>(i) * per, per) =
        detail::stream_noise(cfg.seed, tag, stream(i), t, C, per);
    return z;
  };

  const nn::Denoiser<float> net(params);
  nn::Mat<float> z = draw(0x2a7, cfg.steps);
  const float s = static_cast<float>(cfg.guidance);
  for (int t = cfg.steps; t >= 1; --t) {
    in_c.noisy.data = z;
    in_u.noisy.data = z;
    in_c.timesteps = {t};
    in_u.timesteps = {t};
    const nn::Mat<float> eps_u = net.forward(in_u).data;
    nn::Mat<float> eps_hat;
    if (s == 0.0f) {
      eps_hat = eps_u;
    } else {
      const nn::Mat<float> eps_c = net.forward(in_c).data;
      eps_hat = eps_u + s * (eps_c - eps_u);
    }
    if (hook) hook(t, eps_hat);
    const nn::Mat<float> fresh = sched.sigma[t] != 0.0 ? draw(0x5e9, t) : nn::Mat<float>();
    z = backward_step(z, t, eps_hat, fresh, sched);
  }
  std::vector<Image> out;
  for (int i = 0; i < views; ++i)
    out.push_back(clamp01(latent_to_image(z, net_cfg.image_size, net_cfg.image_size, static_cast<Eigen::Index>(i) * per)));
  return out;
}

struct OrbitRequest {
  const Image* source = nullptr;
  Camera source_camera;
  int frames = 50;
  double elevation = 0;
  double distance = 2.8;
  double start_azimuth = 0;
  std::vector<double> azimuths;  // overrides the uniform subdivision when non-empty
  Mat3 K = Mat3::Identity();
  int width = 32, height = 32;

  std::vector<OrbitPose> poses() const {
    std::vector<OrbitPose> out;
    if (!azimuths.empty()) {
      for (double a : azimuths) out.push_back({elevation, wrap_azimuth(a), distance});
    } else {
      for (int k = 0; k < frames; ++k)
        out.push_back({elevation, wrap_azimuth(start_azimuth + 2 * std::numbers::pi * k / frames), distance});
    }
    return out;
  }
};

/// Orbit request around the source view: same elevation and distance, azimuth
/// starting at the source's.
inline OrbitRequest orbit_around(const Image& source, const CameraRecord& rec, int frames) {
  OrbitRequest r;
  r.source = &source;
  r.source_camera = rec.camera();
  r.frames = frames;
  r.elevation = rec.pose.elevation;
  r.distance = rec.pose.distance;
  r.start_azimuth = rec.pose.azimuth;
  r.K = make_intrinsics(rec.fx, rec.fy, rec.cx, rec.cy);
  r.width = rec.width;
  r.height = rec.height;
  return r;
}

struct OrbitResult {
  std::vector<Image> frames;
  std::vector<CameraRecord> cameras;
};

/// Generates the orbit in windows of `window` frames with stride window-1.
/// Frame k always uses noise stream k, so in shared mode every window starts
/// from the same z_T. Sigma is forced to zero. A frame produced by two
/// windows keeps the earlier window's result.
inline OrbitResult render_orbit(const nn::Parameters<float>& params, const OrbitRequest& req, SampleConfig cfg,
                                int window = 4) {
  const auto poses = req.poses();
  if (poses.size() < 2) throw ConfigError("render_orbit: need at least 2 frames");
  if (window < 2) throw ConfigError("render_orbit: window must be >= 2");
  cfg.sigma = SigmaMode::deterministic;
  OrbitResult res;
  std::vector<Camera> cams;
  for (const auto& p : poses) {
    res.cameras.push_back(CameraRecord::from(p, req.K, req.width, req.height));
    cams.push_back(res.cameras.back().camera());
  }
  const int n = static_cast<int>(poses.size());
  res.frames.resize(n);
  std::vector<bool> done(n, false);
  int start = 0;
  while (true) {
    const int end = std::min(n, start + window);
    SampleRequest sr;
    sr.source = req.source;
    sr.source_camera = req.source_camera;
    for (int k = start; k < end; ++k) {
      sr.targets.push_back(cams[k]);
      sr.streams.push_back(static_cast<std::uint64_t>(k));
    }
    auto imgs = sample_views(params, sr, cfg);
    for (int k = start; k < end; ++k)
      if (!done[k]) {
        res.frames[k] = std::move(imgs[k - start]);
        done[k] = true;
      }
    if (end == n) break;
    start = end - 1;
  }
  return res;
}

inline void write_orbit_cameras(const std::string& path, const std::vector<CameraRecord>& cams) {
  write_cameras(path, cams, "orbit trajectory, one frame per line");
}

}  // namespace mvdiff
