#pragma once

// Ray-conditioned layer norm: out = LN(F) * (1 + gamma) + beta, where
// (gamma, beta) come from a per-site two-layer map of the ray embedding.

#include "mvdiff/nn/ops.hpp"

namespace mvdiff::nn {

template <class T>
struct ModulationHead {
  const Mat<T>* w1;  // hidden × ray_dim
  const Mat<T>* b1;
  const Mat<T>* w2;  // 2C × hidden, rows [0, C) -> gamma, [C, 2C) -> beta
  const Mat<T>* b2;
};

template <class T>
struct ModulationHeadGrads {
  Mat<T>* w1;
  Mat<T>* b1;
  Mat<T>* w2;
  Mat<T>* b2;
};

/// Per-site (gamma; beta) stacked as 2C × sites.
template <class T>
struct ModulationParams {
  Mat<T> gamma_beta;
  Mat<T> hidden_pre;  // kept for backward
  Mat<T> hidden;

  int channels() const { return static_cast<int>(gamma_beta.rows() / 2); }
  auto gamma() const { return gamma_beta.topRows(channels()); }
  auto beta() const { return gamma_beta.bottomRows(channels()); }
};

template <class T>
ModulationParams<T> modulation_params(const Mat<T>& rays, const ModulationHead<T>& head) {
  ModulationParams<T> m;
  m.hidden_pre = linear(rays, *head.w1, *head.b1);
  m.hidden = silu(m.hidden_pre);
  m.gamma_beta = linear(m.hidden, *head.w2, *head.b2);
  return m;
}

/// Accumulates head gradients given d(gamma; beta). Rays are constants.
template <class T>
void modulation_params_backward(const Mat<T>& d_gamma_beta, const Mat<T>& rays, const ModulationParams<T>& m,
                                const ModulationHead<T>& head, const ModulationHeadGrads<T>& g) {
  const Mat<T> d_hidden = linear_backward(d_gamma_beta, m.hidden, *head.w2, *g.w2, *g.b2);
  const Mat<T> d_pre = silu_backward(d_hidden, m.hidden_pre);
  linear_backward(d_pre, rays, *head.w1, *g.w1, *g.b1, false);
}

template <class T>
struct ModulateCache {
  LayerNormCache<T> ln;
};

/// LN over channels, then per-site affine modulation.
template <class T>
Mat<T> modulate(const Mat<T>& features, const Mat<T>& gamma_beta, ModulateCache<T>* cache = nullptr) {
  const Eigen::Index c = features.rows();
  require(gamma_beta.rows() == 2 * c && gamma_beta.cols() == features.cols(),
          "rcn_modulate: modulation does not match the feature map resolution");
  LayerNormCache<T> ln;
  Mat<T> y = layer_norm(features, &ln);
  y.array() = y.array() * (T(1) + gamma_beta.topRows(c).array()) + gamma_beta.bottomRows(c).array();
  if (cache) cache->ln = std::move(ln);
  return y;
}

/// Returns dF; writes d(gamma; beta) into `d_gamma_beta`.
template <class T>
Mat<T> modulate_backward(const Mat<T>& dy, const Mat<T>& gamma_beta, const ModulateCache<T>& cache,
                         Mat<T>& d_gamma_beta) {
  const Eigen::Index c = dy.rows();
  d_gamma_beta.resize(2 * c, dy.cols());
  d_gamma_beta.topRows(c) = dy.cwiseProduct(cache.ln.y);
  d_gamma_beta.bottomRows(c) = dy;
  const Mat<T> d_ln = dy.cwiseProduct((T(1) + gamma_beta.topRows(c).array()).matrix());
  return layer_norm_backward(d_ln, cache.ln);
}

/// Full ray-conditioned normalisation of a feature map given ray embeddings
/// at the same resolution.
template <class T>
FeatureMap<T> rcn_modulate(const FeatureMap<T>& features, const FeatureMap<T>& rays, const ModulationHead<T>& head) {
  require(features.grid == rays.grid, "rcn_modulate: resolution mismatch between features and ray embedding");
  const auto m = modulation_params(rays.data, head);
  return FeatureMap<T>(features.grid, modulate(features.data, m.gamma_beta));
}

}  // namespace mvdiff::nn
