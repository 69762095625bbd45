#pragma once

// Noise-prediction training over multi-view batches.
//
// Stage `rcn_only` draws one random target per sample; stage `attention`
// draws the N views nearest (by camera direction) to a random anchor and
// noises them at one shared timestep. Conditioning dropout replaces the
// source image, pose and rays by zeros so the same network also learns the
// unconditional branch used for guidance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mvdiff/checkpoint.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/dataset.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/metrics.hpp"
#include "mvdiff/nn/optim.hpp"

namespace mvdiff {

enum class Stage { rcn_only, attention };

inline std::string to_string(Stage s) { return s == Stage::rcn_only ? "rcn_only" : "attention"; }

inline Stage parse_stage(const std::string& s) {
  if (s == "rcn_only") return Stage::rcn_only;
  if (s == "attention") return Stage::attention;
  throw ConfigError("train: unknown stage '" + s + "' (valid: rcn_only, attention)");
}

struct TrainConfig {
  Stage stage = Stage::rcn_only;
  int views = 1;  // targets per sample
  double lr = 1e-4;
  double new_multiplier = 10.0;
  double weight_decay = 0.0;
  int batch = 8;
  int steps = 1000;
  std::uint64_t seed = 0;
  double cfg_dropout = 0.1;
  bool freeze_backbone = false;
  int diffusion_steps = 50;
  int eval_every = 0;  // 0 disables periodic evaluation
  int eval_t = 0;      // 0 means ceil(T/4)

  int effective_eval_t() const { return eval_t > 0 ? eval_t : (diffusion_steps + 3) / 4; }

  void validate() const {
    if (views < 1) throw ConfigError("train: views must be >= 1");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (!(lr > 0) || !(new_multiplier > 0) || weight_decay < 0) throw ConfigError("train: invalid learning rate");
    if (cfg_dropout < 0 || cfg_dropout > 1) throw ConfigError("train: cfg_dropout must be in [0, 1]");
    if (diffusion_steps < 1) throw ConfigError("train: diffusion_steps must be >= 1");
    if (eval_t < 0 || eval_t > diffusion_steps) throw ConfigError("train: eval_t outside [0, T]");
  }

  nn::AdamWConfig optimizer() const {
    nn::AdamWConfig o;
    o.lr = lr;
    o.new_multiplier = new_multiplier;
    o.weight_decay = weight_decay;
    o.freeze_backbone = freeze_backbone;
    return o;
  }

  void write(KeyValues& kv, const std::string& prefix = "train.") const {
    kv.set(prefix + "stage", to_string(stage));
    kv.set_value(prefix + "views", views);
    kv.set_value(prefix + "lr", lr);
    kv.set_value(prefix + "new_multiplier", new_multiplier);
    kv.set_value(prefix + "weight_decay", weight_decay);
    kv.set_value(prefix + "batch", batch);
    kv.set_value(prefix + "steps", steps);
    kv.set_value(prefix + "seed", seed);
    kv.set_value(prefix + "cfg_dropout", cfg_dropout);
    kv.set(prefix + "freeze_backbone", freeze_backbone ? "true" : "false");
    kv.set_value(prefix + "diffusion_steps", diffusion_steps);
    kv.set_value(prefix + "eval_every", eval_every);
    kv.set_value(prefix + "eval_t", eval_t);
  }

  static TrainConfig read(const KeyValues& kv, const std::string& prefix = "train.") {
    TrainConfig c;
    c.stage = parse_stage(kv.get(prefix + "stage", to_string(c.stage)));
    c.views = kv.get_number(prefix + "views", c.stage == Stage::attention ? 4 : 1);
    c.lr = kv.get_number(prefix + "lr", c.lr);
    c.new_multiplier = kv.get_number(prefix + "new_multiplier", c.new_multiplier);
    c.weight_decay = kv.get_number(prefix + "weight_decay", c.weight_decay);
    c.batch = kv.get_number(prefix + "batch", c.batch);
    c.steps = kv.get_number(prefix + "steps", c.steps);
    c.seed = kv.get_number(prefix + "seed", c.seed);
    c.cfg_dropout = kv.get_number(prefix + "cfg_dropout", c.cfg_dropout);
    c.freeze_backbone = kv.get_bool(prefix + "freeze_backbone", c.freeze_backbone);
    c.diffusion_steps = kv.get_number(prefix + "diffusion_steps", c.diffusion_steps);
    c.eval_every = kv.get_number(prefix + "eval_every", c.eval_every);
    c.eval_t = kv.get_number(prefix + "eval_t", c.eval_t);
    c.validate();
    return c;
  }
};

/// Indices of the N views whose camera directions are closest (great-circle
/// distance) to the anchor's; the anchor comes first, ties go to the lower index.
inline std::vector<int> nearest_views(const std::vector<Camera>& cams, int anchor, int n) {
  const int total = static_cast<int>(cams.size());
  if (anchor < 0 || anchor >= total) throw ConfigError("nearest_views: anchor out of range");
  if (n < 1 || n > total)
    throw ConfigError("nearest_views: requested " + std::to_string(n) + " of " + std::to_string(total) + " views");
  std::vector<std::pair<double, int>> order;
  for (int i = 0; i < total; ++i)
    // snapped to 1e-12 rad so that geometric ties are decided by index, not rounding
    if (i != anchor) order.emplace_back(std::round(center_angle(cams[anchor], cams[i]) * 1e12), i);
  std::sort(order.begin(), order.end());
  std::vector<int> out{anchor};
  for (int k = 0; k + 1 < n; ++k) out.push_back(order[k].second);
  return out;
}

/// Copies every tensor of `from` that also exists in `to` with the same shape.
inline int transfer_parameters(const nn::Parameters<float>& from, nn::Parameters<float>& to) {
  int copied = 0;
  for (auto& p : to) {
    const int i = from.find(p.name);
    if (i < 0) continue;
    const auto& src = from[i].value;
    if (src.rows() == p.value.rows() && src.cols() == p.value.cols()) {
      p.value = src;
      ++copied;
    }
  }
  return copied;
}

struct TrainReport {
  std::vector<double> losses;
  std::vector<std::pair<int, double>> evals;  // (step, psnr)
  double seconds = 0;
  std::string checkpoint;
};

struct TrainHooks {
  std::ostream* log = nullptr;          // CSV: step,loss,lr,psnr_eval
  std::string nan_snapshot;             // checkpoint written before aborting on a bad loss
  std::function<void(int, double)> on_step;
};

/// One conditional sample: indices into a scene's views.
struct TrainSample {
  const SceneViews* scene = nullptr;
  int source = 0;
  std::vector<int> targets;
  bool drop = false;
};

inline std::vector<TrainSample> draw_batch(const std::vector<const SceneViews*>& scenes, const TrainConfig& cfg,
                                           Rng& rng) {
  std::vector<TrainSample> batch(cfg.batch);
  for (auto& s : batch) {
    s.scene = scenes[uniform_int(rng, 0, static_cast<std::int64_t>(scenes.size()) - 1)];
    const int total = s.scene->views();
    if (total < 2 || total < cfg.views) throw ConfigError("train: scene " + s.scene->id + " has too few views");
    const int anchor = static_cast<int>(uniform_int(rng, 0, total - 1));
    std::vector<Camera> cams;
    for (int v = 0; v < total; ++v) cams.push_back(s.scene->camera(v));
    s.targets = cfg.views == 1 ? std::vector<int>{anchor} : nearest_views(cams, anchor, cfg.views);
    std::vector<int> rest;
    for (int v = 0; v < total; ++v)
      if (std::find(s.targets.begin(), s.targets.end(), v) == s.targets.end()) rest.push_back(v);
    if (rest.empty())
      for (int v = 0; v < total; ++v)
        if (v != anchor) rest.push_back(v);
    s.source = rest[uniform_int(rng, 0, static_cast<std::int64_t>(rest.size()) - 1)];
    s.drop = uniform01(rng) < cfg.cfg_dropout;
  }
  return batch;
}

inline std::vector<InstanceCondition> conditions_for(const std::vector<TrainSample>& batch) {
  std::vector<InstanceCondition> items;
  for (const auto& s : batch) {
    InstanceCondition c;
    c.source = &s.scene->images[s.source];
    c.source_camera = s.scene->camera(s.source);
    for (int t : s.targets) c.targets.push_back(s.scene->camera(t));
    c.drop = s.drop;
    items.push_back(std::move(c));
  }
  return items;
}

inline nn::Mat<float> target_latents(const std::vector<TrainSample>& batch, const nn::NetworkConfig& net) {
  const Eigen::Index per = static_cast<Eigen::Index>(net.image_size) * net.image_size;
  Eigen::Index n = 0;
  for (const auto& s : batch) n += static_cast<Eigen::Index>(s.targets.size());
  nn::Mat<float> z(net.image_channels, n * per);
  Eigen::Index col = 0;
  for (const auto& s : batch)
    for (int t : s.targets) {
      z.middleCols(col, per) = image_to_latent<float>(s.scene->images[t]);
      col += per;
    }
  return z;
}

/// PSNR of the one-step reconstruction of view `target` after noising it to
/// step `t`, conditioned on view `source`; the x0 estimate is clamped to [0, 1].
inline double view_reconstruction_psnr(const nn::Parameters<float>& params, const SceneViews& scene, int source,
                                       int target, const DiffusionSchedule& sched, int t, Rng& rng) {
  const auto& net_cfg = params.config;
  const std::vector<TrainSample> batch{{&scene, source, {target}, false}};
  auto in = make_denoiser_input<float>(net_cfg, conditions_for(batch));
  const nn::Mat<float> z0 = target_latents(batch, net_cfg);
  const nn::Mat<float> eps = standard_normal<float>(static_cast<int>(z0.rows()), static_cast<int>(z0.cols()), rng);
  in.noisy.data = forward_noise(z0, t, eps, sched);
  in.timesteps = {t};
  const auto eps_hat = nn::Denoiser<float>(params).forward(in);
  const nn::Mat<float> x0 = predict_x0(in.noisy.data, t, eps_hat.data, sched);
  return psnr(clamp01(latent_to_image(x0, net_cfg.image_size, net_cfg.image_size)), scene.images[target]);
}

/// Mean one-step reconstruction PSNR over up to `max_views` views, each
/// conditioned on the next view of its scene.
inline double reconstruction_psnr(const nn::Parameters<float>& params, const std::vector<const SceneViews*>& scenes,
                                  const DiffusionSchedule& sched, int t, std::uint64_t seed, int max_views = 16) {
  Rng rng = make_rng(seed, {0xe7a1});
  double sum = 0;
  int count = 0;
  for (const auto* scene : scenes)
    for (int v = 0; v < scene->views() && count < max_views; ++v, ++count)
      sum += view_reconstruction_psnr(params, *scene, (v + 1) % scene->views(), v, sched, t, rng);
  if (count == 0) throw ConfigError("reconstruction_psnr: no views to evaluate");
  return sum / count;
}

inline KeyValues checkpoint_meta(const TrainConfig& cfg) {
  KeyValues kv;
  cfg.write(kv);
  kv.set_value("diffusion.steps", cfg.diffusion_steps);
  return kv;
}

/// Trains `params` in place on the train split of `ds` (all scenes when the
/// split is empty). Deterministic for a fixed (params, dataset, config).
inline TrainReport train(const Dataset& ds, const TrainConfig& cfg, nn::Parameters<float>& params,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  const auto& net_cfg = params.config;
  if (cfg.views > 1 && !net_cfg.attention)
    throw ConfigError("train: multi-view targets need a network with attention enabled");
  if (ds.manifest.image_size != net_cfg.image_size)
    throw ConfigError("train: dataset image size " + std::to_string(ds.manifest.image_size) +
                      " does not match network image size " + std::to_string(net_cfg.image_size));
  auto scenes = ds.split(false);
  if (scenes.empty()) throw ConfigError("train: dataset has no training scenes");
  auto eval_scenes = ds.split(true);
  if (eval_scenes.empty()) eval_scenes = scenes;

  const auto sched = DiffusionSchedule::scaled_linear(cfg.diffusion_steps);
  nn::AdamW<float> opt(params, cfg.optimizer());
  TrainReport report;
  const auto start = std::chrono::steady_clock::now();
  if (hooks.log) *hooks.log << "step,loss,lr,psnr_eval\n";

  for (int step = 1; step <= cfg.steps; ++step) {
    Rng rng = make_rng(cfg.seed, {0x7a1, static_cast<std::uint64_t>(step)});
    const auto batch = draw_batch(scenes, cfg, rng);
    auto in = make_denoiser_input<float>(net_cfg, conditions_for(batch));
    const auto triple = multiview_training_pair(target_latents(batch, net_cfg), cfg.batch, sched, rng);
    in.noisy.data = triple.zt;
    in.timesteps = triple.t;

    const nn::Denoiser<float> net(params);
    nn::DenoiserTape<float> tape;
    const auto out = net.forward(in, &tape);
    const nn::Mat<float> diff = out.data - triple.eps;
    const double loss = diff.cast<double>().squaredNorm() / static_cast<double>(diff.size());
    if (!std::isfinite(loss)) {
      if (!hooks.nan_snapshot.empty()) save_checkpoint(hooks.nan_snapshot, params, checkpoint_meta(cfg));
      std::string ts;
      for (int t : triple.t) ts += (ts.empty() ? "" : ",") + std::to_string(t);
      throw NumericalError("train: non-finite loss at step " + std::to_string(step) + " (timesteps " + ts + ")" +
                           (hooks.nan_snapshot.empty() ? "" : "; parameters saved to " + hooks.nan_snapshot));
    }
    auto grads = params.zeros_like();
    const nn::FeatureMap<float> d_out(out.grid, (2.0f / static_cast<float>(diff.size())) * diff);
    net.backward(in, tape, d_out, grads);
    opt.step(params, grads);
    report.losses.push_back(loss);

    double eval = std::nan("");
    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      eval = reconstruction_psnr(params, eval_scenes, sched, cfg.effective_eval_t(), cfg.seed);
      report.evals.emplace_back(step, eval);
    }
    if (hooks.log) {
      *hooks.log << step << ',' << loss << ',' << cfg.lr << ',';
      if (!std::isnan(eval)) *hooks.log << eval;
      *hooks.log << '\n';
    }
    if (hooks.on_step) hooks.on_step(step, loss);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace mvdiff
