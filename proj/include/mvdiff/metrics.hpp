#pragma once

// Image metrics: PSNR, SSIM, a perceptual distance over a pluggable feature
// extractor, and the rectified perceptual path length over a camera path.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mvdiff/error.hpp"
#include "mvdiff/geometry.hpp"
#include "mvdiff/image.hpp"
#include "mvdiff/nn/ops.hpp"
#include "mvdiff/random.hpp"

namespace mvdiff {

inline constexpr double psnr_cap = 99.0;

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

/// 10 log10(1 / MSE) for images in [0, 1]; identical images give the cap.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m <= 0) return psnr_cap;
  return std::min(psnr_cap, -10.0 * std::log10(m));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
};

/// Gaussian-window SSIM over the fully valid region, averaged over pixels and
/// channels.
inline double ssim(const Image& a, const Image& b, const SsimOptions& opt = {}) {
  require_same_shape(a, b, "ssim");
  const int win = opt.window;
  if (a.height < win || a.width < win)
    throw ShapeMismatch("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                        " smaller than the " + std::to_string(win) + "-pixel window");
  std::vector<double> g(win);
  double gs = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  const double c1 = opt.k1 * opt.k1, c2 = opt.k2 * opt.k2;
  const int oh = a.height - win + 1, ow = a.width - win + 1;
  double total = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double w = g[i] * g[j];
            const double va = a.at(y + i, x + j, c), vb = b.at(y + i, x + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
  return total / (static_cast<double>(a.channels) * oh * ow);
}

// ---------------------------------------------------------------------------
// Perceptual features

/// One scale of features: channels × (h·w), row-major sites.
/// SSIM, or NaN when either side is smaller than the window.
inline double ssim_or_nan(const Image& a, const Image& b, const SsimOptions& opt = {}) {
  if (std::min({a.width, a.height, b.width, b.height}) < opt.window) return std::nan("");
  return ssim(a, b, opt);
}

struct FeatureScale {
  int height = 0, width = 0;
  nn::Mat<double> data;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<FeatureScale> extract(const Image& img) const = 0;
};

/// Fixed random conv pyramid. The first layer applies the same filters to
/// every colour channel and sorts the per-channel responses at each site, so
/// the features are exactly invariant to a permutation of the input channels.
class RandomPyramid final : public FeatureExtractor {
 public:
  explicit RandomPyramid(std::uint64_t seed = 0x9e3d, int scales = 3, int channels = 3, int filters = 6,
                         int width = 16)
      : channels_(channels) {
    if (scales < 2) throw ConfigError("feature pyramid: at least 2 scales required");
    Rng rng = make_rng(seed, {0xfea7});
    NormalSampler normal(rng);
    auto random = [&](int rows, int cols) {
      nn::Mat<double> m(rows, cols);
      const double s = 1.0 / std::sqrt(static_cast<double>(cols));
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = s * normal();
      return m;
    };
    shared_ = random(filters, 9);
    shared_.row(0).setZero();
    shared_(0, 4) = 1.0;  // identity filter keeps absolute colour
    shared_b_ = nn::Mat<double>::Zero(filters, 1);
    int in = filters * channels;
    for (int s = 0; s < scales; ++s) {
      const int out = width * (s + 1);
      weights_.push_back(random(out, 9 * in));
      biases_.push_back(random(out, 1) * 0.1);
      in = out;
    }
  }

  std::vector<FeatureScale> extract(const Image& img) const override {
    if (img.channels != channels_)
      throw ShapeMismatch("feature pyramid: expected " + std::to_string(channels_) + " channels");
    const nn::Grid grid{1, img.height, img.width};
    const int f = static_cast<int>(shared_.rows());
    // per-channel responses of the shared filters
    std::vector<nn::Mat<double>> resp;
    for (int c = 0; c < img.channels; ++c) {
      nn::FeatureMap<double> x(grid, 1);
      for (int y = 0; y < img.height; ++y)
        for (int xx = 0; xx < img.width; ++xx) x.data(0, y * img.width + xx) = img.at(y, xx, c);
      resp.push_back(nn::conv3x3(x, shared_, shared_b_, 1).data);
    }
    nn::FeatureMap<double> h(grid, f * img.channels);
    std::vector<double> vals(img.channels);
    for (int s = 0; s < grid.sites(); ++s)
      for (int k = 0; k < f; ++k) {
        for (int c = 0; c < img.channels; ++c) vals[c] = resp[c](k, s);
        std::sort(vals.begin(), vals.end());
        for (int c = 0; c < img.channels; ++c) h.data(k * img.channels + c, s) = vals[c];
      }
    std::vector<FeatureScale> out;
    for (size_t s = 0; s < weights_.size(); ++s) {
      if (s > 0) h = avg_pool2(h);
      h = nn::conv3x3(h, weights_[s], biases_[s], 1);
      h.data = h.data.cwiseMax(0.0);
      out.push_back({h.grid.h, h.grid.w, h.data});
    }
    return out;
  }

  int scales() const { return static_cast<int>(weights_.size()); }

 private:
  static nn::FeatureMap<double> avg_pool2(const nn::FeatureMap<double>& x) {
    const int h = x.grid.h / 2, w = x.grid.w / 2;
    if (h < 1 || w < 1) throw ShapeMismatch("feature pyramid: image too small for the number of scales");
    nn::FeatureMap<double> y(nn::Grid{1, h, w}, x.channels());
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) {
        const int o = yy * w + xx;
        const int i = 2 * yy * x.grid.w + 2 * xx;
        y.data.col(o) = 0.25 * (x.data.col(i) + x.data.col(i + 1) + x.data.col(i + x.grid.w) +
                                x.data.col(i + x.grid.w + 1));
      }
    return y;
  }

  int channels_;
  nn::Mat<double> shared_, shared_b_;
  std::vector<nn::Mat<double>> weights_, biases_;
};

/// Pixel mask (1 = valid) reduced to a feature grid: a site is valid when
/// every pixel it covers is.
inline std::vector<std::uint8_t> reduce_mask(const std::vector<std::uint8_t>& mask, int height, int width, int fh,
                                             int fw) {
  const int sy = height / fh, sx = width / fw;
  std::vector<std::uint8_t> out(static_cast<size_t>(fh) * fw, 1);
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x)
      for (int dy = 0; dy < sy; ++dy)
        for (int dx = 0; dx < sx; ++dx)
          if (!mask[static_cast<size_t>(y * sy + dy) * width + x * sx + dx]) out[static_cast<size_t>(y) * fw + x] = 0;
  return out;
}

/// Mean over scales of the mean (over valid sites) squared distance between
/// unit-normalised feature vectors. Returns nullopt when a scale has no valid site.
inline std::optional<double> perceptual_distance(const Image& a, const Image& b, const FeatureExtractor& fx,
                                                 const std::vector<std::uint8_t>* mask = nullptr) {
  require_same_shape(a, b, "perceptual_distance");
  const auto fa = fx.extract(a), fb = fx.extract(b);
  double total = 0;
  for (size_t s = 0; s < fa.size(); ++s) {
    const auto& A = fa[s].data;
    const auto& B = fb[s].data;
    std::vector<std::uint8_t> m;
    if (mask) m = reduce_mask(*mask, a.height, a.width, fa[s].height, fa[s].width);
    double sum = 0;
    int n = 0;
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      if (mask && !m[j]) continue;
      const double na = A.col(j).norm() + 1e-10, nb = B.col(j).norm() + 1e-10;
      sum += (A.col(j) / na - B.col(j) / nb).squaredNorm();
      ++n;
    }
    if (n == 0) return std::nullopt;
    total += sum / n;
  }
  return total / static_cast<double>(fa.size());
}

// ---------------------------------------------------------------------------
// PPLC

struct PplcOptions {
  bool rectify = true;
  bool closed_loop = true;
  double plane_depth = 0;  // <= 0: plane through the world origin
  std::optional<double> phi;  // overrides the measured angular gap (radians)
};

struct PplcPair {
  int first = 0, second = 0;
  double distance = 0;  // raw perceptual distance
  double phi = 0;
  double score = 0;     // distance / phi^2
  double coverage = 1;  // valid fraction after rectification
  bool skipped = false;
  std::string reason;
};

struct PplcReport {
  std::vector<PplcPair> pairs;
  double mean = 0;
  bool rectify = true;
  bool closed_loop = true;
  int skipped = 0;

  void write_csv(std::ostream& out) const {
    out << "pair,first,second,distance,phi,score,coverage,skipped\n";
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& p = pairs[i];
      out << i << ',' << p.first << ',' << p.second << ',' << p.distance << ',' << p.phi << ',' << p.score << ','
          << p.coverage << ',' << (p.skipped ? 1 : 0) << '\n';
    }
    out << "# mean_pplc=" << mean << " pairs=" << pairs.size() - skipped << " skipped=" << skipped
        << " rectify=" << (rectify ? 1 : 0) << " closed_loop=" << (closed_loop ? 1 : 0) << '\n';
  }
};

/// Depth of the plane through the world origin, fronto-parallel to `cam`.
inline double origin_plane_depth(const Camera& cam) { return -cam.axis().dot(cam.center()); }

/// Frame b rectified onto frame a's view, with the validity mask.
inline WarpResult rectify_pair(const Image& b, const Camera& cam_a, const Camera& cam_b, double plane_depth = 0) {
  const double d = plane_depth > 0 ? plane_depth : origin_plane_depth(cam_a);
  return warp_image(b, rectifying_homography(cam_a, cam_b, d), 0.5);
}

/// Perceptual distance between frame a and frame b after optionally
/// rectifying b onto a; invalid pixels are neutral grey in both.
inline std::optional<double> pair_distance(const Image& a, const Image& b, const Camera& cam_a, const Camera& cam_b,
                                           const FeatureExtractor& fx, bool rectify, double plane_depth = 0,
                                           double* coverage = nullptr) {
  if (!rectify) {
    if (coverage) *coverage = 1.0;
    return perceptual_distance(a, b, fx);
  }
  const auto w = rectify_pair(b, cam_a, cam_b, plane_depth);
  Image masked_a = a;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x)
      if (!w.valid(y, x))
        for (int c = 0; c < a.channels; ++c) masked_a.at(y, x, c) = 0.5;
  if (coverage) *coverage = w.coverage();
  return perceptual_distance(masked_a, w.image, fx, &w.mask);
}

inline PplcReport pplc(const std::vector<Image>& frames, const std::vector<Camera>& cams, const FeatureExtractor& fx,
                       const PplcOptions& opt = {}) {
  if (frames.size() < 2) throw ConfigError("pplc: need at least 2 frames");
  if (frames.size() != cams.size()) throw ShapeMismatch("pplc: frame and camera counts differ");
  PplcReport rep;
  rep.rectify = opt.rectify;
  rep.closed_loop = opt.closed_loop;
  const int n = static_cast<int>(frames.size());
  const int pairs = opt.closed_loop && n > 2 ? n : n - 1;
  double sum = 0;
  for (int i = 0; i < pairs; ++i) {
    const int j = (i + 1) % n;
    PplcPair p;
    p.first = i;
    p.second = j;
    p.phi = opt.phi ? *opt.phi : center_angle(cams[i], cams[j]);
    try {
      const auto d = pair_distance(frames[i], frames[j], cams[i], cams[j], fx, opt.rectify, opt.plane_depth,
                                   &p.coverage);
      if (!d) throw SingularHomography("no valid pixels after rectification");
      p.distance = *d;
      // identical views score 0 even at a zero gap
      if (p.distance > 0 && !(p.phi > 0)) throw SingularHomography("zero angular gap between differing frames");
      p.score = p.distance > 0 ? p.distance / (p.phi * p.phi) : 0.0;
      sum += p.score;
    } catch (const Error& e) {
      p.skipped = true;
      p.reason = e.what();
      ++rep.skipped;
    }
    rep.pairs.push_back(p);
  }
  const int used = pairs - rep.skipped;
  rep.mean = used > 0 ? sum / used : std::nan("");
  return rep;
}

}  // namespace mvdiff
