#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mvdiff/sampler.hpp"

using namespace mvdiff;

namespace {

constexpr double pi = std::numbers::pi;

nn::NetworkConfig tiny_net(bool attention) {
  nn::NetworkConfig c;
  c.image_size = 8;
  c.channels = {4, 8};
  c.attention = attention;
  c.time_dim = 8;
  c.mod_hidden = 8;
  c.fourier_bands = 2;
  c.encoder_channels = 4;
  return c;
}

/// Initialised parameters with every zero-init head made live, so the
/// conditional and unconditional branches really differ.
nn::Parameters<float> live_params(bool attention, std::uint64_t seed = 5) {
  auto p = nn::init_parameters<float>(tiny_net(attention), seed);
  Rng rng(seed + 100);
  for (auto& t : p)
    if (t.init == nn::Init::zero)
      t.value = 0.2f * standard_normal<float>(static_cast<int>(t.value.rows()), static_cast<int>(t.value.cols()), rng);
  return p;
}

Camera cam(double phi, double theta = 0.2) {
  return orbit_camera({theta, phi, 2.6}, intrinsics_from_fov(0.9, 8, 8), 8, 8);
}

Image source_image() {
  Image img(8, 8, 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.5 + 0.4 * std::sin(0.7 * x + 0.3 * y + c);
  return img;
}

SampleConfig quick(NoiseMode noise, SigmaMode sigma = SigmaMode::deterministic) {
  SampleConfig c;
  c.steps = 8;
  c.noise = noise;
  c.sigma = sigma;
  c.seed = 42;
  return c;
}

double max_diff(const Image& a, const Image& b) {
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST(Sample, ZeroGuidanceUsesTheUnconditionalBranchOnly) {
  const auto p = live_params(true);
  const auto src = source_image();
  SampleRequest req{&src, cam(0), {cam(0.5), cam(1.0)}, {}};
  auto cfg = quick(NoiseMode::shared);
  cfg.guidance = 0;
  std::vector<nn::Mat<float>> got;
  sample_views(p, req, cfg, [&](int, const nn::Mat<float>& e) { got.push_back(e); });

  // replay the loop with an explicit unconditional forward pass
  const auto sched = DiffusionSchedule::scaled_linear(cfg.steps, cfg.sigma);
  InstanceCondition uncond{&src, cam(0), req.targets, true};
  auto in = make_denoiser_input<float>(p.config, {uncond});
  nn::Mat<float> z(3, 2 * 64);
  for (int i = 0; i < 2; ++i) {
    Rng rng = make_rng(cfg.seed, {0x2a7, 0, static_cast<std::uint64_t>(cfg.steps)});
    z.middleCols(i * 64, 64) = standard_normal<float>(3, 64, rng);
  }
  const nn::Denoiser<float> net(p);
  ASSERT_EQ(got.size(), static_cast<size_t>(cfg.steps));
  for (int t = cfg.steps, k = 0; t >= 1; --t, ++k) {
    in.noisy.data = z;
    in.timesteps = {t};
    const nn::Mat<float> eps = net.forward(in).data;
    EXPECT_EQ(got[k], eps) << "t=" << t;
    z = backward_step(z, t, eps, nn::Mat<float>(), sched);
  }
}

TEST(Sample, GuidanceIsAffineInScale) {
  const auto p = live_params(true);
  const auto src = source_image();
  SampleRequest req{&src, cam(0), {cam(0.7), cam(1.4)}, {}};
  // compare the per-step predictions at s = 0, 1, 2 from the same z_t
  InstanceCondition c{&src, cam(0), req.targets, false}, u = c;
  u.drop = true;
  auto in_c = make_denoiser_input<float>(p.config, {c});
  auto in_u = make_denoiser_input<float>(p.config, {u});
  Rng rng(3);
  const nn::Denoiser<float> net(p);
  for (int t : {8, 4, 1}) {
    const nn::Mat<float> z = standard_normal<float>(3, 128, rng);
    in_c.noisy.data = z;
    in_u.noisy.data = z;
    in_c.timesteps = in_u.timesteps = {t};
    const nn::Mat<float> eu = net.forward(in_u).data, ec = net.forward(in_c).data;
    auto guided = [&](float s) -> nn::Mat<float> { return eu + s * (ec - eu); };
    EXPECT_LE((guided(2) - (2 * guided(1) - guided(0))).cwiseAbs().maxCoeff(), 1e-5f);
  }
  // and through the sampler's hook, s = 1 equals the conditional branch
  auto cfg = quick(NoiseMode::shared);
  cfg.guidance = 1;
  nn::Mat<float> first;
  sample_views(p, req, cfg, [&](int t, const nn::Mat<float>& e) {
    if (t == cfg.steps) first = e;
  });
  Rng z_rng = make_rng(cfg.seed, {0x2a7, 0, static_cast<std::uint64_t>(cfg.steps)});
  const nn::Mat<float> z0 = standard_normal<float>(3, 64, z_rng);
  in_c.noisy.data.resize(3, 128);
  in_c.noisy.data << z0, z0;
  in_c.timesteps = {cfg.steps};
  EXPECT_LE((first - net.forward(in_c).data).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Sample, IdenticalCamerasGiveIdenticalViewsWhenShared) {
  const auto p = live_params(true);
  const auto src = source_image();
  SampleRequest req{&src, cam(0), {cam(1.1), cam(1.1), cam(2.0)}, {}};
  const auto out = sample_views(p, req, quick(NoiseMode::shared));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], out[1]);
  EXPECT_NE(out[0], out[2]);
  for (const auto& img : out)
    for (double v : img.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(Sample, IndependentViewsMatchSingleViewRunsWithoutAttention) {
  const auto p = live_params(false);
  const auto src = source_image();
  const std::vector<Camera> targets{cam(0.4), cam(1.3), cam(2.9)};
  for (auto sigma : {SigmaMode::deterministic, SigmaMode::stochastic}) {
    const auto cfg = quick(NoiseMode::independent, sigma);
    const auto joint = sample_views(p, {&src, cam(0), targets, {}}, cfg);
    for (int i = 0; i < 3; ++i) {
      const auto single = sample_views(p, {&src, cam(0), {targets[i]}, {static_cast<std::uint64_t>(i)}}, cfg);
      EXPECT_LE(max_diff(joint[i], single[0]), 1e-5) << "view " << i;
    }
  }
}

TEST(Sample, SingleViewIgnoresNoiseMode) {
  const auto p = live_params(true);
  const auto src = source_image();
  SampleRequest req{&src, cam(0), {cam(0.9)}, {}};
  for (auto sigma : {SigmaMode::deterministic, SigmaMode::stochastic})
    EXPECT_EQ(sample_views(p, req, quick(NoiseMode::shared, sigma)),
              sample_views(p, req, quick(NoiseMode::independent, sigma)));
}

TEST(Sample, PureFunctionOfInputs) {
  const auto p = live_params(true);
  const auto src = source_image();
  SampleRequest req{&src, cam(0), {cam(0.5), cam(1.5)}, {}};
  const auto cfg = quick(NoiseMode::independent);
  EXPECT_EQ(sample_views(p, req, cfg), sample_views(p, req, cfg));
  auto other = cfg;
  other.seed = 43;
  EXPECT_NE(sample_views(p, req, cfg), sample_views(p, req, other));
}

TEST(Sample, RejectsBadRequests) {
  const auto p = live_params(false);
  const auto src = source_image();
  EXPECT_THROW(sample_views(p, {&src, cam(0), {}, {}}, quick(NoiseMode::shared)), ConfigError);
  EXPECT_THROW(sample_views(p, {&src, cam(0), {cam(1)}, {1, 2}}, quick(NoiseMode::shared)), ConfigError);
  auto bad = quick(NoiseMode::shared);
  bad.guidance = -1;
  EXPECT_THROW(sample_views(p, {&src, cam(0), {cam(1)}, {}}, bad), ConfigError);
  EXPECT_THROW(parse_noise_mode("replicated"), ConfigError);
}

TEST(Orbit, FiftyFramesAreSevenPointTwoDegreesApart) {
  OrbitRequest r;
  r.elevation = 0.3;
  const auto poses = r.poses();
  ASSERT_EQ(poses.size(), 50u);
  for (size_t k = 0; k < poses.size(); ++k) {
    const auto& a = poses[k];
    const auto& b = poses[(k + 1) % poses.size()];
    const double gap = std::remainder(b.azimuth - a.azimuth, 2 * pi);
    EXPECT_NEAR(gap * 180 / pi, 7.2, 1e-9);
    EXPECT_EQ(a.elevation, 0.3);
  }
}

TEST(Orbit, TwoFramesEqualOneJointCall) {
  const auto p = live_params(true);
  const auto src = source_image();
  OrbitRequest r;
  r.source = &src;
  r.source_camera = cam(0);
  r.azimuths = {0.3, 0.9};
  r.elevation = 0.2;
  r.distance = 2.6;
  r.K = intrinsics_from_fov(0.9, 8, 8);
  r.width = r.height = 8;
  for (auto mode : {NoiseMode::shared, NoiseMode::independent}) {
    const auto cfg = quick(mode);
    const auto orbit = render_orbit(p, r, cfg);
    const auto joint = sample_views(p, {&src, cam(0), {orbit.cameras[0].camera(), orbit.cameras[1].camera()}, {}}, cfg);
    EXPECT_EQ(orbit.frames, joint);
  }
}

TEST(Orbit, WindowsOverlapByOneFrameAndIgnoreSigma) {
  const auto p = live_params(true);
  const auto src = source_image();
  OrbitRequest r;
  r.source = &src;
  r.source_camera = cam(0);
  r.frames = 7;
  r.K = intrinsics_from_fov(0.9, 8, 8);
  r.width = r.height = 8;
  auto cfg = quick(NoiseMode::independent);
  const auto orbit = render_orbit(p, r, cfg, 4);
  ASSERT_EQ(orbit.frames.size(), 7u);
  // windows {0..3}, {3..6}: the first four frames are the first window
  std::vector<Camera> first;
  for (int k = 0; k < 4; ++k) first.push_back(orbit.cameras[k].camera());
  const auto w0 = sample_views(p, {&src, cam(0), first, {0, 1, 2, 3}}, cfg);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(orbit.frames[k], w0[k]);
  std::vector<Camera> second;
  for (int k = 3; k < 7; ++k) second.push_back(orbit.cameras[k].camera());
  const auto w1 = sample_views(p, {&src, cam(0), second, {3, 4, 5, 6}}, cfg);
  for (int k = 4; k < 7; ++k) EXPECT_EQ(orbit.frames[k], w1[k - 3]);
  cfg.sigma = SigmaMode::stochastic;
  EXPECT_EQ(render_orbit(p, r, cfg, 4).frames, orbit.frames);
  EXPECT_THROW(render_orbit(p, r, cfg, 1), ConfigError);
}

TEST(SampleConfig, RoundTripAndDefaults) {
  const SampleConfig d;
  EXPECT_EQ(d.steps, 50);
  EXPECT_EQ(d.guidance, 3.0);
  EXPECT_EQ(d.noise, NoiseMode::shared);
  SampleConfig c;
  c.noise = NoiseMode::independent;
  c.sigma = SigmaMode::stochastic;
  c.guidance = 1.5;
  c.seed = 77;
  KeyValues kv;
  c.write(kv);
  const auto back = SampleConfig::read(kv);
  EXPECT_EQ(back.noise, NoiseMode::independent);
  EXPECT_EQ(back.sigma, SigmaMode::stochastic);
  EXPECT_EQ(back.guidance, 1.5);
  EXPECT_EQ(back.seed, 77u);
}
