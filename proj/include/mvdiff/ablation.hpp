#pragma once

// Conditioning / attention / noise-sharing ladder on one synthetic dataset.
//
//   A pose_token   B concat_input   C concat_multiscale   D rcn
//   E = D + cross-view attention (second training stage from D's weights)
//   F = E sampled with shared noise, same checkpoint
//
// Every row trains from the same initial weights (tensors are seeded by name)
// on the same batches; rows A-E sample with independent noise.

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "mvdiff/sampler.hpp"
#include "mvdiff/trainer.hpp"

namespace mvdiff {

struct AblationConfig {
  DatasetManifest data;
  nn::NetworkConfig net;
  TrainConfig stage1;
  TrainConfig stage2;
  SampleConfig sample;
  int orbit_frames = 50;
  std::uint64_t seed = 0;

  AblationConfig() {
    data.scenes = 50;
    data.image_size = 16;
    net.image_size = 16;
    net.channels = {16, 32, 64};
    stage1.steps = 3000;
    stage1.lr = 1e-3;
    stage2.stage = Stage::attention;
    stage2.views = 4;
    stage2.batch = 4;
    stage2.steps = 600;
    stage2.lr = 1e-4;
    resolve();
  }

  /// Derives the per-part seeds from `seed` and copies the image size into
  /// the network; keys named in `keep` were given explicitly and stay as read.
  void resolve(const KeyValues& keep = {}) {
    auto derive = [&](const char* key, std::uint64_t& field, std::uint64_t tag) {
      if (!keep.has(key)) field = derive_seed(seed, {tag});
    };
    derive("data.seed", data.seed, 0xda7a);
    derive("train.seed", stage1.seed, 0x57a1);
    derive("stage2.seed", stage2.seed, 0x57a2);
    derive("sample.seed", sample.seed, 0x5a3e);
    if (!keep.has("net.image_size")) net.image_size = data.image_size;
    if (!keep.has("stage2.stage")) stage2.stage = Stage::attention;
  }

  void validate() const {
    data.validate();
    net.validate();
    stage1.validate();
    stage2.validate();
    sample.validate();
    if (stage1.stage != Stage::rcn_only || stage1.views != 1)
      throw ConfigError("ablate: the first stage trains single targets (train.stage = rcn_only)");
    if (stage2.stage != Stage::attention || stage2.views < 2)
      throw ConfigError("ablate: the second stage trains attention on >= 2 views");
    if (stage2.diffusion_steps != stage1.diffusion_steps)
      throw ConfigError("ablate: both stages must use the same diffusion_steps");
    if (net.image_size != data.image_size) throw ConfigError("ablate: net.image_size differs from data.image_size");
    if (data.views < stage2.views) throw ConfigError("ablate: dataset has fewer views than stage2.views");
    if (orbit_frames < 2) throw ConfigError("ablate: orbit_frames must be >= 2");
  }

  void write(KeyValues& kv) const {
    kv.set_value("seed", seed);
    kv.set_value("orbit_frames", orbit_frames);
    data.write(kv, "data.");
    net.write(kv);
    stage1.write(kv, "train.");
    stage2.write(kv, "stage2.");
    sample.write(kv);
  }

  static AblationConfig read(const KeyValues& kv) {
    AblationConfig c;
    c.seed = kv.get_number("seed", c.seed);
    c.orbit_frames = kv.get_number("orbit_frames", c.orbit_frames);
    c.data = read_with_defaults(kv, "data.", c.data);
    c.net = read_with_defaults(kv, "net.", c.net);
    c.stage1 = read_with_defaults(kv, "train.", c.stage1);
    c.stage2 = read_with_defaults(kv, "stage2.", c.stage2);
    c.sample = read_with_defaults(kv, "sample.", c.sample);
    c.resolve(kv);
    c.validate();
    return c;
  }

 private:
  /// Reads `prefix`-keys on top of `defaults` (the readers otherwise fall back
  /// to the library defaults).
  template <class C>
  static C read_with_defaults(const KeyValues& kv, const std::string& prefix, const C& defaults) {
    KeyValues merged;
    defaults.write(merged, prefix);
    for (const auto& [k, v] : kv.values())
      if (k.rfind(prefix, 0) == 0) merged.set(k, v);
    auto c = C::read(merged, prefix);
    for (const auto& [k, v] : kv.values())
      if (k.rfind(prefix, 0) == 0) kv.get(k, v);  // mark as used
    return c;
  }
};

struct AblationRow {
  char mode = 'A';
  std::string label;
  double psnr = 0, ssim = 0, perceptual = 0, pplc = 0;
  std::vector<double> orbit_pplc;  // one per test scene
  std::string checkpoint, checkpoint_hash;
};

struct AblationVerdict {
  bool d_beats_a = false, b_beats_a = false, f_beats_e = false;
  double d_minus_a = 0, b_minus_a = 0;
  int f_lower = 0, orbits = 0;
  static constexpr double orbit_fraction = 0.9;

  bool all() const { return d_beats_a && b_beats_a && f_beats_e; }
};

inline AblationVerdict judge(const std::vector<AblationRow>& rows) {
  if (rows.size() != 6) throw ConfigError("ablate: expected six rows");
  AblationVerdict v;
  v.d_minus_a = rows[3].psnr - rows[0].psnr;
  v.b_minus_a = rows[1].psnr - rows[0].psnr;
  v.d_beats_a = v.d_minus_a > 0;
  v.b_beats_a = v.b_minus_a > 0;
  const auto& e = rows[4].orbit_pplc;
  const auto& f = rows[5].orbit_pplc;
  v.orbits = static_cast<int>(e.size());
  for (size_t i = 0; i < e.size() && i < f.size(); ++i) v.f_lower += f[i] < e[i];
  v.f_beats_e = v.orbits > 0 && v.f_lower >= AblationVerdict::orbit_fraction * v.orbits;
  return v;
}

/// Novel-view quality and orbit consistency of one model on the test scenes.
/// View 0 of each scene is the source; every other view is a target, sampled
/// in groups of `window` with per-target noise streams.
inline AblationRow evaluate_model(const nn::Parameters<float>& params, const std::vector<const SceneViews*>& scenes,
                                  SampleConfig cfg, int window, int orbit_frames, const FeatureExtractor& fx) {
  AblationRow row;
  int images = 0;
  for (const auto* scene : scenes) {
    const Image& src = scene->images[0];
    const Camera src_cam = scene->camera(0);
    for (int first = 1; first < scene->views(); first += window) {
      SampleRequest req{&src, src_cam, {}, {}};
      for (int v = first; v < std::min(scene->views(), first + window); ++v) {
        req.targets.push_back(scene->camera(v));
        req.streams.push_back(static_cast<std::uint64_t>(v));
      }
      const auto out = sample_views(params, req, cfg);
      for (size_t k = 0; k < out.size(); ++k) {
        const Image& truth = scene->images[first + k];
        row.psnr += psnr(out[k], truth);
        row.ssim += ssim_or_nan(out[k], truth);
        row.perceptual += perceptual_distance(out[k], truth, fx).value_or(0.0);
        ++images;
      }
    }
    const auto orbit = render_orbit(params, orbit_around(src, scene->cameras[0], orbit_frames), cfg, window);
    std::vector<Camera> cams;
    for (const auto& r : orbit.cameras) cams.push_back(r.camera());
    row.orbit_pplc.push_back(pplc(orbit.frames, cams, fx).mean);
  }
  if (images == 0) throw ConfigError("ablate: no test views to evaluate");
  row.psnr /= images;
  row.ssim /= images;
  row.perceptual /= images;
  for (double p : row.orbit_pplc) row.pplc += p;
  row.pplc /= static_cast<double>(row.orbit_pplc.size());
  return row;
}

/// Trains and evaluates the six rows, writing checkpoints into `out`.
inline std::vector<AblationRow> run_ablation(const Dataset& ds, const AblationConfig& cfg,
                                             const std::filesystem::path& out, std::ostream* log = nullptr) {
  cfg.validate();
  ensure_directory(out);
  auto test = ds.split(true);
  if (test.empty()) throw ConfigError("ablate: dataset has no test scenes");
  const RandomPyramid fx;
  const std::uint64_t init_seed = derive_seed(cfg.seed, {0x1417});
  auto note = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };
  auto save = [&](const nn::Parameters<float>& p, const TrainConfig& t, char mode, AblationRow& row) {
    row.checkpoint = (out / (std::string("model_") + mode + ".ckpt")).string();
    save_checkpoint(row.checkpoint, p, checkpoint_meta(t));
    row.checkpoint_hash = file_hash(row.checkpoint);
  };

  SampleConfig independent = cfg.sample;
  independent.noise = NoiseMode::independent;
  SampleConfig shared = cfg.sample;
  shared.noise = NoiseMode::shared;
  const int window = cfg.stage2.views;

  std::vector<AblationRow> rows;
  nn::Parameters<float> rcn;
  const nn::ConditioningMode modes[] = {nn::ConditioningMode::pose_token, nn::ConditioningMode::concat_input,
                                        nn::ConditioningMode::concat_multiscale, nn::ConditioningMode::rcn};
  for (int m = 0; m < 4; ++m) {
    const char mode = static_cast<char>('A' + m);
    auto net = cfg.net;
    net.mode = modes[m];
    net.attention = false;
    auto params = nn::init_parameters<float>(net, init_seed);
    note(std::string("ablate: training ") + mode + " (" + nn::to_string(net.mode) + ")");
    train(ds, cfg.stage1, params);
    AblationRow row = evaluate_model(params, test, independent, window, cfg.orbit_frames, fx);
    row.mode = mode;
    row.label = nn::to_string(net.mode);
    save(params, cfg.stage1, mode, row);
    rows.push_back(row);
    if (modes[m] == nn::ConditioningMode::rcn) rcn = std::move(params);
  }

  auto net = cfg.net;
  net.mode = nn::ConditioningMode::rcn;
  net.attention = true;
  auto params = nn::init_parameters<float>(net, init_seed);
  transfer_parameters(rcn, params);
  note("ablate: training E (rcn + attention)");
  train(ds, cfg.stage2, params);
  AblationRow e = evaluate_model(params, test, independent, window, cfg.orbit_frames, fx);
  e.mode = 'E';
  e.label = "rcn+attention";
  save(params, cfg.stage2, 'E', e);
  rows.push_back(e);

  // F reloads E's checkpoint: only the sampling noise changes
  note("ablate: sampling F (shared noise)");
  const auto ck = load_checkpoint(e.checkpoint);
  AblationRow f = evaluate_model(ck.params, test, shared, window, cfg.orbit_frames, fx);
  f.mode = 'F';
  f.label = "rcn+attention+shared_noise";
  f.checkpoint = e.checkpoint;
  f.checkpoint_hash = file_hash(f.checkpoint);
  rows.push_back(f);
  return rows;
}

inline void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "mode,label,psnr,ssim,perceptual,pplc,checkpoint_hash\n";
  out.precision(10);
  for (const auto& r : rows)
    out << r.mode << ',' << r.label << ',' << r.psnr << ',' << r.ssim << ',' << r.perceptual << ',' << r.pplc << ','
        << r.checkpoint_hash << '\n';
}

inline void write_orbit_table(std::ostream& out, const std::vector<AblationRow>& rows,
                              const std::vector<const SceneViews*>& scenes) {
  out << "scene";
  for (const auto& r : rows) out << ",pplc_" << r.mode;
  out << '\n';
  out.precision(10);
  for (size_t i = 0; i < scenes.size(); ++i) {
    out << scenes[i]->id;
    for (const auto& r : rows) out << ',' << (i < r.orbit_pplc.size() ? r.orbit_pplc[i] : std::nan(""));
    out << '\n';
  }
}

inline void write_verdict(std::ostream& out, const AblationVerdict& v) {
  out.precision(6);
  out << (v.d_beats_a ? "PASS" : "FAIL") << " rcn over pose_token: psnr(D) - psnr(A) = " << v.d_minus_a << " dB\n";
  out << (v.b_beats_a ? "PASS" : "FAIL") << " concat_input over pose_token: psnr(B) - psnr(A) = " << v.b_minus_a
      << " dB\n";
  out << (v.f_beats_e ? "PASS" : "FAIL") << " shared noise lowers pplc: " << v.f_lower << " of " << v.orbits
      << " orbits (need " << AblationVerdict::orbit_fraction * 100 << "%)\n";
}

}  // namespace mvdiff
