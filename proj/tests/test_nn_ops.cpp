#include <gtest/gtest.h>

#include "mvdiff/nn/modulation.hpp"
#include "mvdiff/nn/ops.hpp"
#include "support/gradcheck.hpp"

using namespace mvdiff;
using namespace mvdiff::nn;
using mvdiff::testing::check_gradient;
using mvdiff::testing::MatD;
using mvdiff::testing::random_matrix;
using mvdiff::testing::weighted_sum;

namespace {

FeatureMap<double> random_map(Grid g, int channels, Rng& rng, double scale = 1.0) {
  return FeatureMap<double>(g, random_matrix(channels, g.sites(), rng, scale));
}

}  // namespace

TEST(Conv3x3, GradientsMatchFiniteDifferences) {
  for (int stride : {1, 2}) {
    Rng rng(7 + stride);
    FeatureMap<double> x = random_map({2, 5, 6}, 3, rng);
    MatD w = random_matrix(4, 27, rng, 0.5), b = random_matrix(4, 1, rng);
    const Grid og = conv_output_grid(x.grid, stride);
    const MatD wy = random_matrix(4, og.sites(), rng);
    ConvCache<double> cache;
    const auto y = conv3x3(x, w, b, stride, &cache);
    MatD dw = MatD::Zero(4, 27), db = MatD::Zero(4, 1);
    const auto dx = conv3x3_backward(FeatureMap<double>(og, wy), w, cache, dw, db);
    auto f = [&] { return weighted_sum(conv3x3(x, w, b, stride).data, wy); };
    EXPECT_LT(check_gradient(x.data, dx.data, f, rng).rel(), 1e-7);
    EXPECT_LT(check_gradient(w, dw, f, rng).rel(), 1e-7);
    EXPECT_LT(check_gradient(b, db, f, rng).rel(), 1e-7);
    EXPECT_EQ(y.grid, og);
  }
}

TEST(Conv3x3, MatchesDirectLoop) {
  Rng rng(3);
  const FeatureMap<double> x = random_map({1, 4, 4}, 2, rng);
  const MatD w = random_matrix(3, 18, rng), b = random_matrix(3, 1, rng);
  const auto y = conv3x3(x, w, b, 1);
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      for (int co = 0; co < 3; ++co) {
        double s = b(co, 0);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ci = 0; ci < 2; ++ci) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
              s += w(co, (ky * 3 + kx) * 2 + ci) * x.data(ci, iy * 4 + ix);
            }
        EXPECT_NEAR(y.data(co, oy * 4 + ox), s, 1e-12);
      }
}

TEST(LayerNormAndSilu, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  MatD x = random_matrix(6, 9, rng, 2.0);
  const MatD wy = random_matrix(6, 9, rng);
  LayerNormCache<double> cache;
  layer_norm(x, &cache);
  const MatD dx = layer_norm_backward(wy, cache);
  EXPECT_LT(check_gradient(x, dx, [&] { return weighted_sum(layer_norm(x), wy); }, rng).rel(), 1e-7);

  const MatD ds = silu_backward(wy, x);
  EXPECT_LT(check_gradient(x, ds, [&] { return weighted_sum(silu(x), wy); }, rng).rel(), 1e-8);
}

TEST(Upsample, BackwardIsAdjoint) {
  Rng rng(5);
  const FeatureMap<double> x = random_map({2, 3, 3}, 4, rng);
  const FeatureMap<double> u = upsample2(x);
  const FeatureMap<double> g = random_map(u.grid, 4, rng);
  const auto gx = upsample2_backward(g, x.grid);
  EXPECT_NEAR(u.data.cwiseProduct(g.data).sum(), x.data.cwiseProduct(gx.data).sum(), 1e-10);
}

// ---------------------------------------------------------------------------
// Ray-conditioned normalisation

TEST(RcnModulate, ZeroModulationIsPlainLayerNorm) {
  Rng rng(1);
  const MatD f = random_matrix(5, 12, rng, 3.0);
  const MatD gb = MatD::Zero(10, 12);
  EXPECT_EQ(modulate(f, gb), layer_norm(f));
}

TEST(RcnModulate, ConstantFeaturesYieldShift) {
  Rng rng(2);
  const MatD f = MatD::Constant(4, 7, 1.25);
  const MatD gb = random_matrix(8, 7, rng);
  const MatD y = modulate(f, gb);
  EXPECT_LT((y - gb.bottomRows(4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RcnModulate, ResolutionMismatchIsRejected) {
  Rng rng(2);
  const MatD f = random_matrix(4, 16, rng);
  EXPECT_THROW(modulate(f, MatD(MatD::Zero(8, 4))), ShapeMismatch);
  const FeatureMap<double> feat({1, 4, 4}, f);
  const FeatureMap<double> rays({1, 2, 2}, 78);
  MatD w1 = MatD::Zero(8, 78), b1 = MatD::Zero(8, 1), w2 = MatD::Zero(8, 8), b2 = MatD::Zero(8, 1);
  EXPECT_THROW(rcn_modulate(feat, rays, ModulationHead<double>{&w1, &b1, &w2, &b2}), ShapeMismatch);
}

TEST(RcnModulate, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  const int C = 5, R = 78, Hd = 16, P = 10;
  MatD f = random_matrix(C, P, rng, 2.0);
  MatD rays = random_matrix(R, P, rng);
  MatD w1 = random_matrix(Hd, R, rng, 0.2), b1 = random_matrix(Hd, 1, rng, 0.1);
  MatD w2 = random_matrix(2 * C, Hd, rng, 0.3), b2 = random_matrix(2 * C, 1, rng, 0.1);
  const MatD wy = random_matrix(C, P, rng);
  const ModulationHead<double> head{&w1, &b1, &w2, &b2};

  auto objective = [&] {
    const auto m = modulation_params(rays, head);
    return weighted_sum(modulate(f, m.gamma_beta), wy);
  };
  const auto m = modulation_params(rays, head);
  ModulateCache<double> cache;
  modulate(f, m.gamma_beta, &cache);
  MatD d_gb;
  const MatD df = modulate_backward(wy, m.gamma_beta, cache, d_gb);
  MatD gw1 = MatD::Zero(Hd, R), gb1 = MatD::Zero(Hd, 1), gw2 = MatD::Zero(2 * C, Hd), gb2 = MatD::Zero(2 * C, 1);
  modulation_params_backward(d_gb, rays, m, head, ModulationHeadGrads<double>{&gw1, &gb1, &gw2, &gb2});

  EXPECT_LT(check_gradient(f, df, objective, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(w1, gw1, objective, rng, 60).rel(), 1e-4);
  EXPECT_LT(check_gradient(b1, gb1, objective, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(w2, gw2, objective, rng, 60).rel(), 1e-4);
  EXPECT_LT(check_gradient(b2, gb2, objective, rng).rel(), 1e-4);

  // gamma and beta as free inputs
  MatD gb = random_matrix(2 * C, P, rng);
  modulate(f, gb, &cache);
  const MatD df2 = modulate_backward(wy, gb, cache, d_gb);
  (void)df2;
  EXPECT_LT(check_gradient(gb, d_gb, [&] { return weighted_sum(modulate(f, gb), wy); }, rng).rel(), 1e-4);
}

// ---------------------------------------------------------------------------
// View attention

namespace {

struct AttnParams {
  MatD q, k, v, o, ob;
  AttentionWeights<double> weights() const { return {&q, &k, &v, &o, &ob}; }
};

AttnParams random_attention(int c, Rng& rng) {
  return {random_matrix(c, c, rng, 0.6), random_matrix(c, c, rng, 0.6), random_matrix(c, c, rng, 0.6),
          random_matrix(c, c, rng, 0.6), random_matrix(c, 1, rng, 0.2)};
}

/// Reorders views of every instance: new view i = old view perm[i].
FeatureMap<double> permute_views(const FeatureMap<double>& x, int views, const std::vector<int>& perm) {
  FeatureMap<double> y = x;
  const int per = x.grid.per_image();
  for (int b = 0; b < x.grid.n / views; ++b)
    for (int i = 0; i < views; ++i)
      y.data.middleCols((b * views + i) * per, per) = x.data.middleCols((b * views + perm[i]) * per, per);
  return y;
}

}  // namespace

TEST(ViewAttention, PermutationEquivariant) {
  Rng rng(21);
  const int views = 4;
  const auto p = random_attention(6, rng);
  const FeatureMap<double> x = random_map({2 * views, 3, 3}, 6, rng);
  const std::vector<int> perm{2, 0, 3, 1};
  const auto lhs = view_attention(permute_views(x, views, perm), views, p.weights());
  const auto rhs = permute_views(view_attention(x, views, p.weights()), views, perm);
  EXPECT_LT((lhs.data - rhs.data).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ViewAttention, NoSpatialMixing) {
  Rng rng(22);
  const int views = 3;
  const auto p = random_attention(5, rng);
  FeatureMap<double> x = random_map({views, 4, 4}, 5, rng);
  const auto before = view_attention(x, views, p.weights());
  const int per = 16, site = 5;
  x.data.col(1 * per + site) += MatD::Constant(5, 1, 0.75);  // view 1, pixel 5
  const auto after = view_attention(x, views, p.weights());
  for (int n = 0; n < views; ++n)
    for (int s = 0; s < per; ++s) {
      const Eigen::Index col = n * per + s;
      if (s == site) continue;
      EXPECT_TRUE((after.data.col(col).array() == before.data.col(col).array()).all()) << "view " << n << " site " << s;
    }
  // the perturbed site still couples across views
  EXPECT_GT((after.data.col(0 * per + site) - before.data.col(0 * per + site)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ViewAttention, SingleViewProjectsItself) {
  Rng rng(23);
  const auto p = random_attention(4, rng);
  const FeatureMap<double> x = random_map({2, 2, 2}, 4, rng);
  const auto y = view_attention(x, 1, p.weights());
  MatD expected = p.o * (p.v * layer_norm(x.data));
  expected.colwise() += p.ob.col(0);
  expected += x.data;
  EXPECT_LT((y.data - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ViewAttention, ZeroOutputProjectionIsIdentity) {
  Rng rng(24);
  auto p = random_attention(4, rng);
  p.o.setZero();
  p.ob.setZero();
  const FeatureMap<double> x = random_map({4, 2, 2}, 4, rng);
  EXPECT_EQ(view_attention(x, 2, p.weights()).data, x.data);
}

TEST(ViewAttention, GradientsMatchFiniteDifferences) {
  Rng rng(25);
  const int views = 3, c = 4;
  auto p = random_attention(c, rng);
  FeatureMap<double> x = random_map({2 * views, 2, 3}, c, rng);
  const MatD wy = random_matrix(c, x.sites(), rng);
  AttentionCache<double> cache;
  view_attention(x, views, p.weights(), &cache);
  MatD gq = MatD::Zero(c, c), gk = gq, gv = gq, go = gq, gob = MatD::Zero(c, 1);
  const auto dx = view_attention_backward(FeatureMap<double>(x.grid, wy), p.weights(), cache,
                                          AttentionGrads<double>{&gq, &gk, &gv, &go, &gob});
  auto f = [&] { return weighted_sum(view_attention(x, views, p.weights()).data, wy); };
  EXPECT_LT(check_gradient(x.data, dx.data, f, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(p.q, gq, f, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(p.k, gk, f, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(p.v, gv, f, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(p.o, go, f, rng).rel(), 1e-4);
  EXPECT_LT(check_gradient(p.ob, gob, f, rng).rel(), 1e-4);
}
