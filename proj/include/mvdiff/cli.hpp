#pragma once

// Command implementations behind the `mvdiff` executable. Each command takes
// the merged key=value settings and an output directory, reads the keys it
// knows, rejects the rest, and writes `run_config.txt` (the resolved settings)
// next to its outputs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mvdiff/ablation.hpp"
#include "mvdiff/sampler.hpp"
#include "mvdiff/trainer.hpp"

namespace mvdiff::cli {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int exit_ok = 0;
inline constexpr int exit_runtime = 1;
inline constexpr int exit_usage = 2;

struct RunContext {
  KeyValues kv;
  fs::path out;
  std::ostream* log = &std::cout;

  std::uint64_t seed() const { return kv.get_number<std::uint64_t>("seed", 0); }
  void note(const std::string& s) const {
    if (log) *log << s << '\n';
  }
};

/// Also accepts the `command` key a resolved config carries, if it names this command.
inline void require_out(const RunContext& ctx, const char* command) {
  if (const auto c = ctx.kv.get("command", command); c != command)
    throw ConfigError(std::string(command) + ": settings were resolved for '" + c + "'");
  if (ctx.out.empty()) throw UsageError(std::string(command) + ": --out <dir> is required");
  ensure_directory(ctx.out);
}

inline void write_run_config(const RunContext& ctx, const KeyValues& resolved, const char* command) {
  KeyValues kv = resolved;
  kv.set("command", command);
  kv.save((ctx.out / "run_config.txt").string(), "resolved settings; rerun with --config on this file");
}

/// Sets `field` from the run seed unless the user gave `key` explicitly.
inline void derive_seed_key(const KeyValues& kv, const std::string& key, std::uint64_t& field, std::uint64_t seed,
                            std::uint64_t tag) {
  if (!kv.has(key)) field = derive_seed(seed, {tag});
}

inline std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Frames laid out row-major in a near-square grid on a black canvas.
inline Image montage(const std::vector<Image>& frames) {
  if (frames.empty()) return {};
  const int n = static_cast<int>(frames.size());
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  const int h = frames[0].height, w = frames[0].width, c = frames[0].channels;
  Image out(rows * h, cols * w, c, 0.0);
  for (int k = 0; k < n; ++k) {
    require_same_shape(frames[k], frames[0], "montage");
    const int oy = (k / cols) * h, ox = (k % cols) * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(oy + y, ox + x, ch) = frames[k].at(y, x, ch);
  }
  return out;
}

inline std::string frame_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03d.png", k);
  return buf;
}

// ---------------------------------------------------------------------------

inline void cmd_dataset_gen(const RunContext& ctx) {
  require_out(ctx, "dataset-gen");
  auto m = DatasetManifest::read(ctx.kv, "data.");
  derive_seed_key(ctx.kv, "data.seed", m.seed, ctx.seed(), 0xda7a);
  const int threads = ctx.kv.get_number("threads", 1);
  ctx.kv.reject_unknown("dataset-gen");
  if (threads < 1) throw ConfigError("dataset-gen: threads must be >= 1");
  const auto ids = build_dataset(m, ctx.out, threads);
  KeyValues resolved;
  resolved.set_value("seed", ctx.seed());
  resolved.set_value("threads", threads);
  m.write(resolved, "data.");
  write_run_config(ctx, resolved, "dataset-gen");
  ctx.note("dataset-gen: " + std::to_string(ids.size()) + " scenes x " + std::to_string(m.views) + " views in " +
           ctx.out.string());
}

inline void cmd_train(const RunContext& ctx) {
  require_out(ctx, "train");
  const std::string data = ctx.kv.require_str("data");
  const std::string init = ctx.kv.get("init", "");
  auto net = nn::NetworkConfig::read(ctx.kv);
  auto cfg = TrainConfig::read(ctx.kv);
  derive_seed_key(ctx.kv, "train.seed", cfg.seed, ctx.seed(), 0x57a1);
  std::uint64_t init_seed = ctx.kv.get_number<std::uint64_t>("init_seed", derive_seed(ctx.seed(), {0x1417}));
  ctx.kv.reject_unknown("train");

  const auto ds = load_dataset(data);
  auto params = nn::init_parameters<float>(net, init_seed);
  if (!init.empty()) {
    const auto from = load_checkpoint(init);
    const int copied = transfer_parameters(from.params, params);
    ctx.note("train: " + std::to_string(copied) + " tensors initialised from " + init);
  }
  std::ofstream log((ctx.out / "train_log.csv").string());
  if (!log) throw IoError((ctx.out / "train_log.csv").string(), "cannot open for writing");
  TrainHooks hooks;
  hooks.log = &log;
  hooks.nan_snapshot = (ctx.out / "nan_snapshot.ckpt").string();
  auto report = train(ds, cfg, params, hooks);
  report.checkpoint = (ctx.out / "model.ckpt").string();
  save_checkpoint(report.checkpoint, params, checkpoint_meta(cfg));

  KeyValues resolved;
  resolved.set_value("seed", ctx.seed());
  resolved.set("data", data);
  if (!init.empty()) resolved.set("init", init);
  resolved.set_value("init_seed", init_seed);
  net.write(resolved);
  cfg.write(resolved);
  write_run_config(ctx, resolved, "train");
  std::ostringstream msg;
  msg << "train: " << cfg.steps << " steps in " << report.seconds << " s";
  if (!report.losses.empty()) msg << ", final loss " << report.losses.back();
  if (!report.evals.empty()) msg << ", eval psnr " << report.evals.back().second << " dB";
  ctx.note(msg.str());
}

inline void cmd_render(const RunContext& ctx) {
  require_out(ctx, "render");
  const std::string ckpt_path = ctx.kv.require_str("checkpoint");
  const std::string source_path = ctx.kv.require_str("source");
  const std::string cameras_path = ctx.kv.require_str("cameras");
  const int source_view = ctx.kv.get_number("source_view", 0);
  const int frames = ctx.kv.get_number("frames", 50);
  auto cfg = SampleConfig::read(ctx.kv);
  derive_seed_key(ctx.kv, "sample.seed", cfg.seed, ctx.seed(), 0x5a3e);
  const auto ck = load_checkpoint(ckpt_path);
  if (const auto h = ctx.kv.get("checkpoint_hash", ""); !h.empty() && h != file_hash(ckpt_path))
    throw ConfigError("render: " + ckpt_path + " does not match checkpoint_hash " + h);
  // window defaults to the number of views the checkpoint was trained on
  const int trained_views = ck.meta.get_number("train.views", 1);
  const int window = ctx.kv.get_number("window", std::max(2, trained_views));
  ctx.kv.reject_unknown("render");
  if (frames < 2) throw ConfigError("render: frames must be >= 2");

  const auto cams = read_cameras(cameras_path);
  if (source_view < 0 || source_view >= static_cast<int>(cams.size()))
    throw ConfigError("render: source_view " + std::to_string(source_view) + " not in " + cameras_path);
  const Image source = read_png(source_path);
  const int size = ck.params.config.image_size;
  if (source.width != size || source.height != size)
    throw ShapeMismatch("render: " + source_path + " is " + std::to_string(source.width) + "x" +
                        std::to_string(source.height) + ", the network expects " + std::to_string(size));
  const auto result = render_orbit(ck.params, orbit_around(source, cams[source_view], frames), cfg, window);
  for (size_t k = 0; k < result.frames.size(); ++k)
    write_png((ctx.out / frame_name(static_cast<int>(k))).string(), result.frames[k]);
  write_orbit_cameras((ctx.out / "orbit.txt").string(), result.cameras);
  write_png((ctx.out / "montage.png").string(), montage(result.frames));

  KeyValues resolved;
  resolved.set_value("seed", ctx.seed());
  resolved.set("checkpoint", ckpt_path);
  resolved.set("checkpoint_hash", file_hash(ckpt_path));
  resolved.set("source", source_path);
  resolved.set("cameras", cameras_path);
  resolved.set_value("source_view", source_view);
  resolved.set_value("frames", frames);
  resolved.set_value("window", window);
  cfg.sigma = SigmaMode::deterministic;  // what render_orbit actually used
  cfg.write(resolved);
  write_run_config(ctx, resolved, "render");
  ctx.note("render: " + std::to_string(frames) + " frames in " + ctx.out.string());
}

inline void cmd_eval(const RunContext& ctx) {
  require_out(ctx, "eval");
  const fs::path frames_dir = ctx.kv.require_str("frames");
  const std::string cameras_path = ctx.kv.get("cameras", (frames_dir / "orbit.txt").string());
  const std::string reference = ctx.kv.get("reference", "");
  PplcOptions opt;
  opt.rectify = ctx.kv.get_bool("pplc.rectify", opt.rectify);
  opt.closed_loop = ctx.kv.get_bool("pplc.closed_loop", opt.closed_loop);
  opt.plane_depth = ctx.kv.get_number("pplc.plane_depth", opt.plane_depth);
  if (ctx.kv.has("pplc.phi")) opt.phi = ctx.kv.get_number("pplc.phi", 0.0);
  ctx.kv.get_number<std::uint64_t>("seed", 0);
  ctx.kv.reject_unknown("eval");

  auto files = png_files(frames_dir);
  files.erase(std::remove_if(files.begin(), files.end(), [](const fs::path& p) { return p.filename() == "montage.png"; }),
              files.end());
  if (files.size() < 2) throw ConfigError("eval: need at least 2 frames in " + frames_dir.string());
  const auto records = read_cameras(cameras_path);
  if (records.size() != files.size())
    throw ConfigError("eval: " + std::to_string(files.size()) + " frames but " + std::to_string(records.size()) +
                      " cameras in " + cameras_path);
  std::vector<Image> frames;
  std::vector<Camera> cams;
  for (const auto& f : files) frames.push_back(read_png(f.string()));
  for (const auto& r : records) cams.push_back(r.camera());
  const RandomPyramid fx;

  KeyValues resolved;
  resolved.set_value("seed", ctx.seed());
  resolved.set("frames", frames_dir.string());
  resolved.set("cameras", cameras_path);
  if (!reference.empty()) {
    resolved.set("reference", reference);
    std::ofstream csv((ctx.out / "metrics.csv").string());
    if (!csv) throw IoError((ctx.out / "metrics.csv").string(), "cannot open for writing");
    csv.precision(10);
    csv << "frame,psnr,ssim,perceptual\n";
    double sp = 0, ss = 0, sd = 0;
    for (size_t k = 0; k < files.size(); ++k) {
      const auto ref_path = fs::path(reference) / files[k].filename();
      const Image ref = read_png(ref_path.string());
      const double p = psnr(frames[k], ref), s = ssim_or_nan(frames[k], ref);
      const double d = perceptual_distance(frames[k], ref, fx).value_or(std::nan(""));
      csv << files[k].filename().string() << ',' << p << ',' << s << ',' << d << '\n';
      sp += p;
      ss += s;
      sd += d;
    }
    const double n = static_cast<double>(files.size());
    csv << "# mean_psnr=" << sp / n << " mean_ssim=" << ss / n << " mean_perceptual=" << sd / n << '\n';
  }
  const auto rep = pplc(frames, cams, fx, opt);
  std::ofstream csv((ctx.out / "pplc.csv").string());
  if (!csv) throw IoError((ctx.out / "pplc.csv").string(), "cannot open for writing");
  csv.precision(10);
  rep.write_csv(csv);
  resolved.set("pplc.rectify", opt.rectify ? "true" : "false");
  resolved.set("pplc.closed_loop", opt.closed_loop ? "true" : "false");
  resolved.set_value("pplc.plane_depth", opt.plane_depth);
  if (opt.phi) resolved.set_value("pplc.phi", *opt.phi);
  write_run_config(ctx, resolved, "eval");
  std::ostringstream msg;
  msg << "eval: " << files.size() << " frames, mean pplc " << rep.mean << " (" << rep.skipped << " pairs skipped)";
  ctx.note(msg.str());
}

/// Returns true when all directional checks passed.
inline bool cmd_ablate(const RunContext& ctx) {
  require_out(ctx, "ablate");
  const auto cfg = AblationConfig::read(ctx.kv);
  ctx.kv.reject_unknown("ablate");
  const auto ds = render_dataset(cfg.data);
  const auto rows = run_ablation(ds, cfg, ctx.out, ctx.log);
  const auto verdict = judge(rows);
  {
    std::ofstream t((ctx.out / "ablation.csv").string());
    write_ablation_table(t, rows);
    std::ofstream o((ctx.out / "orbit_pplc.csv").string());
    write_orbit_table(o, rows, ds.split(true));
    std::ofstream v((ctx.out / "verdict.txt").string());
    write_verdict(v, verdict);
    if (!t || !o || !v) throw IoError(ctx.out.string(), "cannot write ablation reports");
  }
  KeyValues resolved;
  cfg.write(resolved);
  write_run_config(ctx, resolved, "ablate");
  if (ctx.log) {
    write_ablation_table(*ctx.log, rows);
    write_verdict(*ctx.log, verdict);
  }
  return verdict.all();
}

}  // namespace mvdiff::cli
