#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mvdiff/metrics.hpp"
#include "support/scenarios.hpp"

using namespace mvdiff;

namespace {

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w, 3);
  for (auto& v : img.data) v = uniform01(rng);
  return img;
}

Image smooth_image(int size, Rng& rng) {
  Image img(size, size, 3);
  const double fx = 0.1 + 0.3 * uniform01(rng), fy = 0.1 + 0.3 * uniform01(rng), ph = 6 * uniform01(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.5 + 0.4 * std::sin(fx * x + fy * y + ph + c);
  return img;
}

Image add_noise(Image img, double amp, Rng& rng) {
  NormalSampler n(rng);
  for (auto& v : img.data) v += amp * n();
  return img;
}

Image permute_channels(const Image& img, const std::array<int, 3>& perm) {
  Image out(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, perm[c]);
  return out;
}

}  // namespace

TEST(Psnr, CapZeroAndOracle) {
  Rng rng(1);
  const auto a = random_image(8, 9, rng);
  EXPECT_EQ(psnr(a, a), 99.0);
  EXPECT_DOUBLE_EQ(psnr(Image(4, 4, 3, 0.0), Image(4, 4, 3, 1.0)), 0.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_image(7, 5, rng), y = random_image(7, 5, rng);
    double s = 0;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 5; ++j)
        for (int c = 0; c < 3; ++c) s += std::pow(x.at(i, j, c) - y.at(i, j, c), 2);
    EXPECT_NEAR(psnr(x, y), 10 * std::log10(1.0 / (s / 105)), 1e-9);
  }
  EXPECT_THROW(psnr(a, Image(8, 8, 3)), ShapeMismatch);
}

TEST(Ssim, IdentityConstantsAndSymmetry) {
  Rng rng(2);
  const auto a = random_image(16, 20, rng), b = random_image(16, 20, rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
  // constants: variances vanish, only the luminance term remains
  const double m1 = 0.2, m2 = 0.7, c1 = 0.01 * 0.01;
  const double expect = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
  EXPECT_NEAR(ssim(Image(12, 12, 3, m1), Image(12, 12, 3, m2)), expect, 1e-12);
  EXPECT_THROW(ssim(Image(10, 12, 3), Image(10, 12, 3)), ShapeMismatch);
}

TEST(Perceptual, ZeroSymmetricAndMultiScale) {
  Rng rng(3);
  const RandomPyramid fx;
  EXPECT_GE(fx.scales(), 2);
  const auto a = random_image(32, 32, rng), b = random_image(32, 32, rng);
  EXPECT_EQ(*perceptual_distance(a, a, fx), 0.0);
  EXPECT_GT(*perceptual_distance(a, b, fx), 0.0);
  EXPECT_DOUBLE_EQ(*perceptual_distance(a, b, fx), *perceptual_distance(b, a, fx));
  EXPECT_THROW(RandomPyramid(1, 1), ConfigError);
}

TEST(Perceptual, MonotoneUnderNoise) {
  const RandomPyramid fx;
  int strict = 0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    const auto img = smooth_image(32, rng);
    double prev = 0;
    bool ok = true;
    for (double amp : {0.05, 0.1, 0.2}) {
      Rng noise(seed);  // same pattern, scaled
      const double d = *perceptual_distance(img, add_noise(img, amp, noise), fx);
      ok &= d > prev;
      prev = d;
    }
    strict += ok;
  }
  EXPECT_GE(strict, 99);
}

TEST(Perceptual, ChannelPermutationInvariance) {
  Rng rng(4);
  const RandomPyramid fx;
  const auto a = random_image(32, 32, rng), b = random_image(32, 32, rng);
  const std::array<int, 3> perm{2, 0, 1};
  EXPECT_EQ(*perceptual_distance(a, b, fx), *perceptual_distance(permute_channels(a, perm), permute_channels(b, perm), fx));
}

TEST(Pplc, IdenticalFramesAndCameras) {
  Rng rng(5);
  const RandomPyramid fx;
  const auto img = random_image(32, 32, rng);
  const auto cam = orbit_camera({0.2, 0.3, 2.8}, intrinsics_from_fov(0.9, 32, 32), 32, 32);
  const auto rep = pplc({img, img, img}, {cam, cam, cam}, fx);
  EXPECT_EQ(rep.mean, 0.0);
  EXPECT_EQ(rep.skipped, 0);
}

TEST(Pplc, ConstantSequenceWithoutRectificationIsZero) {
  const RandomPyramid fx;
  const Image img(32, 32, 3, 0.4);
  std::vector<Camera> cams;
  for (int k = 0; k < 6; ++k)
    cams.push_back(orbit_camera({0.1, 2 * std::numbers::pi * k / 6, 2.8}, intrinsics_from_fov(0.9, 32, 32), 32, 32));
  PplcOptions opt;
  opt.rectify = false;
  const auto rep = pplc(std::vector<Image>(6, img), cams, fx, opt);
  EXPECT_EQ(rep.mean, 0.0);
  EXPECT_EQ(rep.pairs.size(), 6u);  // closed loop
  opt.closed_loop = false;
  EXPECT_EQ(pplc(std::vector<Image>(6, img), cams, fx, opt).pairs.size(), 5u);
}

TEST(Pplc, InverseSquareGapScaling) {
  Rng rng(6);
  const RandomPyramid fx;
  std::vector<Image> frames{random_image(32, 32, rng), random_image(32, 32, rng), random_image(32, 32, rng)};
  std::vector<Camera> cams;
  for (int k = 0; k < 3; ++k)
    cams.push_back(orbit_camera({0.1, 0.1 * k, 2.8}, intrinsics_from_fov(0.9, 32, 32), 32, 32));
  PplcOptions opt;
  opt.closed_loop = false;
  opt.phi = 0.1;
  const double one = pplc(frames, cams, fx, opt).mean;
  opt.phi = 0.2;
  const double two = pplc(frames, cams, fx, opt).mean;
  EXPECT_NEAR(two, one / 4, 1e-12 * one);
}

TEST(Pplc, ChannelPermutationGivesEqualScore) {
  Rng rng(7);
  const RandomPyramid fx;
  std::vector<Image> frames, permuted;
  std::vector<Camera> cams;
  for (int k = 0; k < 4; ++k) {
    frames.push_back(random_image(32, 32, rng));
    permuted.push_back(permute_channels(frames.back(), {1, 2, 0}));
    cams.push_back(orbit_camera({0.1, 0.15 * k, 2.8}, intrinsics_from_fov(0.9, 32, 32), 32, 32));
  }
  EXPECT_EQ(pplc(frames, cams, fx).mean, pplc(permuted, cams, fx).mean);
}

TEST(Pplc, DegeneratePairIsSkippedAndReported) {
  Rng rng(8);
  const RandomPyramid fx;
  const Mat3 K = intrinsics_from_fov(0.9, 32, 32);
  // second camera on the first one's origin plane
  const std::vector<Camera> cams{orbit_camera({0, 0, 2}, K, 32, 32), orbit_camera({0, std::numbers::pi / 2, 2}, K, 32, 32)};
  PplcOptions opt;
  opt.closed_loop = false;
  const auto rep = pplc({random_image(32, 32, rng), random_image(32, 32, rng)}, cams, fx, opt);
  EXPECT_EQ(rep.skipped, 1);
  EXPECT_TRUE(rep.pairs[0].skipped);
  EXPECT_TRUE(std::isnan(rep.mean));
  std::ostringstream csv;
  rep.write_csv(csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "pair,first,second,distance,phi,score,coverage,skipped");
}

TEST(Pplc, RectificationAlignsPlanarPairs) {
  const RandomPyramid fx;
  int reduced = 0, increased = 0;
  const int n = 200;
  for (int k = 0; k < n; ++k) {
    const auto r = mvdiff::testing::rectification_check(mvdiff::testing::planar_pair(k), fx);
    reduced += r.rectified < r.raw;
    increased += r.mismatched > r.raw;
  }
  RecordProperty("reduced", reduced);
  RecordProperty("increased", increased);
  EXPECT_GE(reduced, 190);
  EXPECT_GE(increased, 190);
}
