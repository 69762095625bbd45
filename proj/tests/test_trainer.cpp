#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "mvdiff/trainer.hpp"

using namespace mvdiff;
namespace fs = std::filesystem;

namespace {

constexpr double pi = std::numbers::pi;

nn::NetworkConfig tiny_net(nn::ConditioningMode mode = nn::ConditioningMode::rcn, bool attention = false) {
  nn::NetworkConfig c;
  c.image_size = 8;
  c.channels = {4, 8};
  c.mode = mode;
  c.attention = attention;
  c.time_dim = 8;
  c.mod_hidden = 8;
  c.fourier_bands = 2;
  c.encoder_channels = 4;
  return c;
}

Dataset tiny_dataset(int scenes = 3, int views = 6) {
  DatasetManifest m;
  m.scenes = scenes;
  m.views = views;
  m.image_size = 8;
  m.seed = 11;
  return render_dataset(m);
}

TrainConfig short_run(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch = 2;
  c.lr = 1e-3;
  c.seed = 3;
  return c;
}

Camera on_circle(double phi, double theta = 0.0) {
  return orbit_camera({theta, phi, 2.5}, intrinsics_from_fov(0.9, 8, 8), 8, 8);
}

std::vector<int> nearest_oracle(const std::vector<Camera>& cams, int anchor, int n) {
  const Vec3 a = cams[anchor].center().normalized();
  std::vector<int> idx(cams.size());
  for (size_t i = 0; i < cams.size(); ++i) idx[i] = static_cast<int>(i);
  auto angle = [&](int i) {
    return i == anchor ? -1.0 : std::acos(std::clamp(a.dot(cams[i].center().normalized()), -1.0, 1.0));
  };
  std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return angle(x) < angle(y); });
  idx.resize(n);
  return idx;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("mvdiff_trainer_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(NearestViews, FourOnACircle) {
  const std::vector<Camera> cams{on_circle(0), on_circle(pi / 2), on_circle(pi), on_circle(3 * pi / 2)};
  // 90 and 270 degrees tie; the lower index wins
  EXPECT_EQ(nearest_views(cams, 0, 2), (std::vector<int>{0, 1}));
  EXPECT_EQ(nearest_views(cams, 2, 2), (std::vector<int>{2, 1}));
  EXPECT_EQ(nearest_views(cams, 3, 3), (std::vector<int>{3, 0, 2}));
  auto all = nearest_views(cams, 1, 4);
  EXPECT_EQ(all.front(), 1);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2, 3}));
}

TEST(NearestViews, MatchesExhaustiveSort) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int total = static_cast<int>(uniform_int(rng, 2, 12));
    std::vector<Camera> cams;
    for (int i = 0; i < total; ++i) cams.push_back(on_circle(2 * pi * uniform01(rng), 1.2 * (uniform01(rng) - 0.5)));
    const int anchor = static_cast<int>(uniform_int(rng, 0, total - 1));
    const int n = static_cast<int>(uniform_int(rng, 1, total));
    EXPECT_EQ(nearest_views(cams, anchor, n), nearest_oracle(cams, anchor, n));
  }
}

TEST(NearestViews, RejectsTooManyViews) {
  const std::vector<Camera> cams{on_circle(0), on_circle(1)};
  EXPECT_THROW(nearest_views(cams, 0, 3), ConfigError);
  EXPECT_THROW(nearest_views(cams, 2, 1), ConfigError);
}

TEST(Optimizer, NewGroupStepsTenTimesFurther) {
  nn::Parameters<double> p;
  p.add("base.w", 3, 2, nn::ParamGroup::backbone, nn::Init::fan_in, 2);
  p.add("head.w", 3, 2, nn::ParamGroup::fresh, nn::Init::fan_in, 2);
  p.initialize(4);
  const auto before = p;
  Rng rng(5);
  const nn::Mat<double> g = standard_normal<double>(3, 2, rng);
  nn::AdamWConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0;
  nn::AdamW<double> opt(p, cfg);
  opt.step(p, {g, g});
  const nn::Mat<double> d_base = p[0].value - before[0].value;
  const nn::Mat<double> d_head = p[1].value - before[1].value;
  for (Eigen::Index i = 0; i < g.size(); ++i) EXPECT_NEAR(d_head.data()[i], 10 * d_base.data()[i], 1e-15);
  EXPECT_DOUBLE_EQ(opt.lr(nn::ParamGroup::fresh), 10 * opt.lr(nn::ParamGroup::backbone));

  cfg.freeze_backbone = true;
  nn::AdamW<double> frozen(p, cfg);
  const auto mid = p;
  frozen.step(p, {g, g});
  EXPECT_EQ(p[0].value, mid[0].value);
  EXPECT_NE(p[1].value, mid[1].value);
}

TEST(Optimizer, DecayIsDecoupledAndSkipsBiases) {
  nn::Parameters<double> p;
  p.add("layer.w", 2, 2, nn::ParamGroup::backbone, nn::Init::fan_in, 2);
  p.add("layer.b", 2, 1, nn::ParamGroup::backbone, nn::Init::zero, 2);
  p.initialize(1);
  p[1].value.setConstant(0.5);
  const auto before = p;
  nn::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.2;
  nn::AdamW<double> opt(p, cfg);
  opt.step(p, p.zeros_like());  // zero gradient: only decay moves anything
  EXPECT_TRUE(p[0].value.isApprox(before[0].value * (1 - 0.1 * 0.2), 1e-15));
  EXPECT_EQ(p[1].value, before[1].value);
}

TEST(Train, ZeroStepsLeavesInitialisation) {
  const auto ds = tiny_dataset();
  auto params = nn::init_parameters<float>(tiny_net(), 7);
  const auto init = params;
  const auto cfg = short_run(0);
  const auto rep = train(ds, cfg, params);
  EXPECT_TRUE(rep.losses.empty());
  EXPECT_EQ(encode_checkpoint(params, checkpoint_meta(cfg)), encode_checkpoint(init, checkpoint_meta(cfg)));
}

TEST(Train, SameSeedGivesBitIdenticalLosses) {
  const auto ds = tiny_dataset();
  auto a = nn::init_parameters<float>(tiny_net(), 7);
  auto b = a;
  const auto cfg = short_run(6);
  const auto ra = train(ds, cfg, a);
  const auto rb = train(ds, cfg, b);
  ASSERT_EQ(ra.losses.size(), 6u);
  EXPECT_EQ(ra.losses, rb.losses);
  for (double l : ra.losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(encode_checkpoint(a, {}), encode_checkpoint(b, {}));

  auto c = nn::init_parameters<float>(tiny_net(), 7);
  auto other = cfg;
  other.seed = 4;
  EXPECT_NE(train(ds, other, c).losses, ra.losses);
}

TEST(Train, RcnStepZeroLossMatchesPoseToken) {
  // modulation heads start at zero, so RCN is the bare backbone at init
  const auto ds = tiny_dataset();
  const auto cfg = short_run(1);
  auto rcn = nn::init_parameters<float>(tiny_net(nn::ConditioningMode::rcn), 9);
  auto token = nn::init_parameters<float>(tiny_net(nn::ConditioningMode::pose_token), 9);
  const double l_rcn = train(ds, cfg, rcn).losses.at(0);
  const double l_token = train(ds, cfg, token).losses.at(0);
  EXPECT_NEAR(l_rcn, l_token, 1e-6);
}

TEST(Train, AttentionStageDrawsNearestViewsAtOneTimestep) {
  const auto ds = tiny_dataset(2, 8);
  TrainConfig cfg = short_run(1);
  cfg.stage = Stage::attention;
  cfg.views = 4;
  Rng rng(13);
  const auto scenes = ds.split(false).empty() ? std::vector<const SceneViews*>{&ds.scenes[0]} : ds.split(false);
  const auto batch = draw_batch(scenes, cfg, rng);
  for (const auto& s : batch) {
    ASSERT_EQ(s.targets.size(), 4u);
    std::vector<Camera> cams;
    for (int v = 0; v < s.scene->views(); ++v) cams.push_back(s.scene->camera(v));
    EXPECT_EQ(s.targets, nearest_views(cams, s.targets.front(), 4));
    EXPECT_EQ(std::count(s.targets.begin(), s.targets.end(), s.source), 0);
  }
  // training with multi-view targets needs attention in the network
  auto plain = nn::init_parameters<float>(tiny_net(), 1);
  EXPECT_THROW(train(ds, cfg, plain), ConfigError);
  auto attn = nn::init_parameters<float>(tiny_net(nn::ConditioningMode::rcn, true), 1);
  EXPECT_EQ(train(ds, cfg, attn).losses.size(), 1u);
}

TEST(Train, CheckpointRoundTripReproducesForward) {
  TempDir dir("ckpt");
  const auto ds = tiny_dataset();
  auto params = nn::init_parameters<float>(tiny_net(), 7);
  const auto cfg = short_run(3);
  train(ds, cfg, params);
  const auto path = (dir.path / "model.ckpt").string();
  save_checkpoint(path, params, checkpoint_meta(cfg));
  const auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.params.config, params.config);
  EXPECT_EQ(TrainConfig::read(ck.meta).steps, 3);

  Rng rng(8);
  const auto& sv = ds.scenes[0];
  InstanceCondition c{&sv.images[0], sv.camera(0), {sv.camera(1)}, false};
  auto in = make_denoiser_input<float>(params.config, {c});
  in.noisy.data = standard_normal<float>(3, 64, rng);
  in.timesteps = {17};
  const auto y0 = nn::Denoiser<float>(params).forward(in).data;
  const auto y1 = nn::Denoiser<float>(ck.params).forward(in).data;
  EXPECT_LE((y0 - y1).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Train, NonFiniteLossAbortsWithSnapshot) {
  TempDir dir("nan");
  const auto ds = tiny_dataset();
  auto params = nn::init_parameters<float>(tiny_net(), 7);
  params[0].value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  TrainHooks hooks;
  hooks.nan_snapshot = (dir.path / "snapshot.ckpt").string();
  try {
    train(ds, short_run(2), params, hooks);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("snapshot.ckpt"), std::string::npos);
  }
  ASSERT_TRUE(fs::exists(hooks.nan_snapshot));
  EXPECT_TRUE(std::isnan(load_checkpoint(hooks.nan_snapshot).params[0].value(0, 0)));
}

TEST(Train, LogHasHeaderAndOneRowPerStep) {
  const auto ds = tiny_dataset();
  auto params = nn::init_parameters<float>(tiny_net(), 7);
  auto cfg = short_run(4);
  cfg.eval_every = 2;
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  const auto rep = train(ds, cfg, params, hooks);
  std::istringstream in(log.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,loss,lr,psnr_eval");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
  ASSERT_EQ(rep.evals.size(), 2u);
  EXPECT_EQ(rep.evals[0].first, 2);
  EXPECT_EQ(rep.evals[1].first, 4);
}

TEST(TrainConfig, RoundTripAndErrors) {
  TrainConfig c;
  c.stage = Stage::attention;
  c.views = 4;
  c.lr = 3e-4;
  c.freeze_backbone = true;
  KeyValues kv;
  c.write(kv);
  const auto back = TrainConfig::read(kv);
  EXPECT_EQ(back.stage, Stage::attention);
  EXPECT_EQ(back.views, 4);
  EXPECT_DOUBLE_EQ(back.lr, 3e-4);
  EXPECT_TRUE(back.freeze_backbone);
  EXPECT_EQ(TrainConfig::read(KeyValues::parse_string("train.stage = attention")).views, 4);
  EXPECT_THROW(TrainConfig::read(KeyValues::parse_string("train.stage = both")), ConfigError);
  EXPECT_THROW(TrainConfig::read(KeyValues::parse_string("train.cfg_dropout = 2")), ConfigError);
  try {
    nn::NetworkConfig::read(KeyValues::parse_string("net.conditioning_mode = film"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pose_token, concat_input, concat_multiscale, rcn"), std::string::npos);
  }
}
