#pragma once

// Differentiable building blocks. Each forward takes an optional cache that
// the matching backward consumes; backward functions accumulate parameter
// gradients (+=) and return the input gradient.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <numbers>
#include <vector>

#include "mvdiff/nn/tensor.hpp"

namespace mvdiff::nn {

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1 or 2.
// Weight layout: Cout × (9·Cin), column index = (ky*3 + kx)*Cin + ci.

inline Grid conv_output_grid(const Grid& in, int stride) {
  return {in.n, (in.h - 1) / stride + 1, (in.w - 1) / stride + 1};
}

template <class T>
Mat<T> im2col(const FeatureMap<T>& x, int stride) {
  const int cin = x.channels();
  const Grid out = conv_output_grid(x.grid, stride);
  Mat<T> col = Mat<T>::Zero(9 * cin, out.sites());
  const T* src = x.data.data();
  T* dst = col.data();
  for (int n = 0; n < out.n; ++n) {
    for (int oy = 0; oy < out.h; ++oy) {
      for (int ox = 0; ox < out.w; ++ox) {
        const Eigen::Index site = (static_cast<Eigen::Index>(n) * out.h + oy) * out.w + ox;
        T* column = dst + site * 9 * cin;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= x.grid.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= x.grid.w) continue;
            const Eigen::Index in_site = (static_cast<Eigen::Index>(n) * x.grid.h + iy) * x.grid.w + ix;
            std::memcpy(column + (ky * 3 + kx) * cin, src + in_site * cin, sizeof(T) * cin);
          }
        }
      }
    }
  }
  return col;
}

template <class T>
FeatureMap<T> col2im(const Mat<T>& dcol, const Grid& in, int cin, int stride) {
  const Grid out = conv_output_grid(in, stride);
  FeatureMap<T> dx(in, cin);
  T* dst = dx.data.data();
  const T* src = dcol.data();
  for (int n = 0; n < out.n; ++n) {
    for (int oy = 0; oy < out.h; ++oy) {
      for (int ox = 0; ox < out.w; ++ox) {
        const Eigen::Index site = (static_cast<Eigen::Index>(n) * out.h + oy) * out.w + ox;
        const T* column = src + site * 9 * cin;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= in.h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= in.w) continue;
            const Eigen::Index in_site = (static_cast<Eigen::Index>(n) * in.h + iy) * in.w + ix;
            T* d = dst + in_site * cin;
            const T* s = column + (ky * 3 + kx) * cin;
            for (int c = 0; c < cin; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
  return dx;
}

template <class T>
struct ConvCache {
  Mat<T> col;
  Grid in;
  int cin = 0;
  int stride = 1;
};

template <class T>
FeatureMap<T> conv3x3(const FeatureMap<T>& x, const Mat<T>& w, const Mat<T>& b, int stride,
                      ConvCache<T>* cache = nullptr) {
  require(w.cols() == 9 * x.channels(), "conv3x3: weight/input channel mismatch");
  require(b.size() == w.rows(), "conv3x3: bias size mismatch");
  Mat<T> col = im2col(x, stride);
  FeatureMap<T> y(conv_output_grid(x.grid, stride), Mat<T>(w.rows(), col.cols()));
  y.data.noalias() = w * col;
  y.data.colwise() += b.col(0);
  if (cache) {
    cache->col = std::move(col);
    cache->in = x.grid;
    cache->cin = x.channels();
    cache->stride = stride;
  }
  return y;
}

template <class T>
FeatureMap<T> conv3x3_backward(const FeatureMap<T>& dy, const Mat<T>& w, const ConvCache<T>& cache, Mat<T>& dw,
                               Mat<T>& db, bool need_dx = true) {
  dw.noalias() += dy.data * cache.col.transpose();
  db += dy.data.rowwise().sum();
  if (!need_dx) return {};
  Mat<T> dcol(w.cols(), dy.data.cols());
  dcol.noalias() = w.transpose() * dy.data;
  return col2im(dcol, cache.in, cache.cin, cache.stride);
}

// ---------------------------------------------------------------------------
// Per-site affine map (1x1 convolution / fully connected on columns).

template <class T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  require(w.cols() == x.rows() && b.size() == w.rows(), "linear: shape mismatch");
  Mat<T> y(w.rows(), x.cols());
  y.noalias() = w * x;
  y.colwise() += b.col(0);
  return y;
}

template <class T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& w, Mat<T>& dw, Mat<T>& db,
                       bool need_dx = true) {
  dw.noalias() += dy * x.transpose();
  db += dy.rowwise().sum();
  if (!need_dx) return {};
  Mat<T> dx(w.cols(), dy.cols());
  dx.noalias() = w.transpose() * dy;
  return dx;
}

// ---------------------------------------------------------------------------
// Layer norm over the channels of each site, no affine parameters.

template <class T>
struct LayerNormCache {
  Mat<T> y;
  Vec<T> inv_std;
};

template <class T>
Mat<T> layer_norm(const Mat<T>& x, LayerNormCache<T>* cache = nullptr, double eps = 1e-5) {
  const Eigen::Index c = x.rows();
  Mat<T> y(x.rows(), x.cols());
  Vec<T> inv_std(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const auto col = x.col(j);
    const T mean = col.sum() / static_cast<T>(c);
    const T var = (col.array() - mean).square().sum() / static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    y.col(j) = (col.array() - mean) * is;
    inv_std(j) = is;
  }
  if (cache) {
    cache->y = y;
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache) {
  const Eigen::Index c = dy.rows();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index j = 0; j < dy.cols(); ++j) {
    const auto g = dy.col(j);
    const auto y = cache.y.col(j);
    const T mg = g.sum() / static_cast<T>(c);
    const T mgy = g.dot(y) / static_cast<T>(c);
    dx.col(j) = cache.inv_std(j) * (g.array() - mg - y.array() * mgy);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// SiLU

template <class T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return v / (T(1) + std::exp(-v)); });
}

template <class T>
Mat<T> silu_backward(const Mat<T>& dy, const Mat<T>& x) {
  return dy.binaryExpr(x, [](T g, T v) {
    const T s = T(1) / (T(1) + std::exp(-v));
    return g * s * (T(1) + v * (T(1) - s));
  });
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling.

template <class T>
FeatureMap<T> upsample2(const FeatureMap<T>& x) {
  const Grid g{x.grid.n, x.grid.h * 2, x.grid.w * 2};
  FeatureMap<T> y(g, Mat<T>(x.channels(), g.sites()));
  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.h; ++oy)
      for (int ox = 0; ox < g.w; ++ox)
        y.data.col((static_cast<Eigen::Index>(n) * g.h + oy) * g.w + ox) =
            x.data.col((static_cast<Eigen::Index>(n) * x.grid.h + oy / 2) * x.grid.w + ox / 2);
  return y;
}

template <class T>
FeatureMap<T> upsample2_backward(const FeatureMap<T>& dy, const Grid& in) {
  FeatureMap<T> dx(in, dy.channels());
  const Grid& g = dy.grid;
  for (int n = 0; n < g.n; ++n)
    for (int oy = 0; oy < g.h; ++oy)
      for (int ox = 0; ox < g.w; ++ox)
        dx.data.col((static_cast<Eigen::Index>(n) * in.h + oy / 2) * in.w + ox / 2) +=
            dy.data.col((static_cast<Eigen::Index>(n) * g.h + oy) * g.w + ox);
  return dx;
}

// ---------------------------------------------------------------------------
// Per-image pooling and broadcasting between (C × n) vectors and feature maps.

template <class T>
Mat<T> mean_pool(const FeatureMap<T>& x) {
  const int per = x.grid.per_image();
  Mat<T> out(x.channels(), x.grid.n);
  for (int n = 0; n < x.grid.n; ++n) out.col(n) = x.data.middleCols(n * per, per).rowwise().mean();
  return out;
}

template <class T>
FeatureMap<T> mean_pool_backward(const Mat<T>& dy, const Grid& g) {
  const int per = g.per_image();
  FeatureMap<T> dx(g, static_cast<int>(dy.rows()));
  for (int n = 0; n < g.n; ++n)
    dx.data.middleCols(n * per, per).colwise() = dy.col(n) / static_cast<T>(per);
  return dx;
}

/// x.col(site) += v.col(image(site) / group); `group` images share one column of v.
template <class T>
void add_per_image(FeatureMap<T>& x, const Mat<T>& v, int group = 1) {
  const int per = x.grid.per_image();
  for (int n = 0; n < x.grid.n; ++n) x.data.middleCols(n * per, per).colwise() += v.col(n / group);
}

template <class T>
Mat<T> add_per_image_backward(const FeatureMap<T>& dy, int columns, int group = 1) {
  const int per = dy.grid.per_image();
  Mat<T> dv = Mat<T>::Zero(dy.channels(), columns);
  for (int n = 0; n < dy.grid.n; ++n) dv.col(n / group) += dy.data.middleCols(n * per, per).rowwise().sum();
  return dv;
}

/// Repeats each image of `x` `times` times along the image axis.
template <class T>
FeatureMap<T> repeat_images(const FeatureMap<T>& x, int times) {
  const int per = x.grid.per_image();
  Grid g{x.grid.n * times, x.grid.h, x.grid.w};
  FeatureMap<T> y(g, Mat<T>(x.channels(), g.sites()));
  for (int n = 0; n < g.n; ++n) y.data.middleCols(n * per, per) = x.data.middleCols((n / times) * per, per);
  return y;
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep embedding, dim/2 frequencies 10000^(-k/(dim/2)).

template <class T>
Mat<T> timestep_embedding(const std::vector<int>& steps, int dim) {
  Mat<T> out(dim, static_cast<Eigen::Index>(steps.size()));
  const int half = dim / 2;
  for (size_t j = 0; j < steps.size(); ++j) {
    for (int k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * k / half);
      out(k, j) = static_cast<T>(std::sin(steps[j] * f));
      out(half + k, j) = static_cast<T>(std::cos(steps[j] * f));
    }
    if (dim % 2) out(dim - 1, j) = T(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention across the view axis, independently at every site.
//
// Input columns are laid out image-major with images ordered (instance, view):
// image = b * views + i. For each (instance, site) the `views` columns form one
// token sequence. Single head, pre layer norm, residual:
//   u = LN(x); q,k,v = Wq u, Wk u, Wv u; o = softmax(q k^T / sqrt(C)) v
//   out = x + Wo o + bo

template <class T>
struct AttentionWeights {
  const Mat<T>* wq;
  const Mat<T>* wk;
  const Mat<T>* wv;
  const Mat<T>* wo;
  const Mat<T>* bo;
};

template <class T>
struct AttentionGrads {
  Mat<T>* wq;
  Mat<T>* wk;
  Mat<T>* wv;
  Mat<T>* wo;
  Mat<T>* bo;
};

template <class T>
struct AttentionCache {
  LayerNormCache<T> ln;
  Mat<T> q, k, v, o;
  std::vector<T> probs;  // per group, views×views row-major
  int views = 1;
};

namespace detail {
template <class F>
void for_each_view_group(const Grid& g, int views, F&& f) {
  const int per = g.per_image();
  const int instances = g.n / views;
  std::vector<Eigen::Index> cols(views);
  Eigen::Index group = 0;
  for (int b = 0; b < instances; ++b) {
    for (int s = 0; s < per; ++s, ++group) {
      for (int i = 0; i < views; ++i) cols[i] = static_cast<Eigen::Index>(b * views + i) * per + s;
      f(group, cols);
    }
  }
}
}  // namespace detail

template <class T>
FeatureMap<T> view_attention(const FeatureMap<T>& x, int views, const AttentionWeights<T>& p,
                             AttentionCache<T>* cache = nullptr) {
  require(views >= 1 && x.grid.n % views == 0, "view_attention: image count not divisible by views");
  const int c = x.channels();
  LayerNormCache<T> ln;
  const Mat<T> u = layer_norm(x.data, &ln);
  Mat<T> q(c, u.cols()), k(c, u.cols()), v(c, u.cols());
  q.noalias() = *p.wq * u;
  k.noalias() = *p.wk * u;
  v.noalias() = *p.wv * u;
  Mat<T> o = Mat<T>::Zero(c, u.cols());
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  const Eigen::Index groups = static_cast<Eigen::Index>(x.grid.n / views) * x.grid.per_image();
  std::vector<T> probs(cache ? static_cast<size_t>(groups) * views * views : 0);
  std::vector<T> row(views);
  detail::for_each_view_group(x.grid, views, [&](Eigen::Index group, const std::vector<Eigen::Index>& cols) {
    for (int i = 0; i < views; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < views; ++j) {
        row[j] = q.col(cols[i]).dot(k.col(cols[j])) * scale;
        mx = std::max(mx, row[j]);
      }
      T sum = 0;
      for (int j = 0; j < views; ++j) sum += (row[j] = std::exp(row[j] - mx));
      for (int j = 0; j < views; ++j) {
        row[j] /= sum;
        o.col(cols[i]) += row[j] * v.col(cols[j]);
      }
      if (cache) std::copy(row.begin(), row.end(), probs.begin() + (group * views + i) * views);
    }
  });
  FeatureMap<T> y(x.grid, Mat<T>(c, u.cols()));
  y.data.noalias() = *p.wo * o;
  y.data.colwise() += p.bo->col(0);
  y.data += x.data;
  if (cache) {
    cache->ln = std::move(ln);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->probs = std::move(probs);
    cache->views = views;
  }
  return y;
}

template <class T>
FeatureMap<T> view_attention_backward(const FeatureMap<T>& dy, const AttentionWeights<T>& p,
                                      const AttentionCache<T>& cache, const AttentionGrads<T>& g) {
  const int c = dy.channels();
  const int views = cache.views;
  g.wo->noalias() += dy.data * cache.o.transpose();
  *g.bo += dy.data.rowwise().sum();
  Mat<T> d_o(c, dy.data.cols());
  d_o.noalias() = p.wo->transpose() * dy.data;

  Mat<T> dq = Mat<T>::Zero(c, dy.data.cols());
  Mat<T> dk = Mat<T>::Zero(c, dy.data.cols());
  Mat<T> dv = Mat<T>::Zero(c, dy.data.cols());
  const T scale = T(1) / std::sqrt(static_cast<T>(c));
  std::vector<T> da(views), ds(views);
  detail::for_each_view_group(dy.grid, views, [&](Eigen::Index group, const std::vector<Eigen::Index>& cols) {
    for (int i = 0; i < views; ++i) {
      const T* a = cache.probs.data() + (group * views + i) * views;
      T dot = 0;
      for (int j = 0; j < views; ++j) {
        da[j] = d_o.col(cols[i]).dot(cache.v.col(cols[j]));
        dv.col(cols[j]) += a[j] * d_o.col(cols[i]);
        dot += da[j] * a[j];
      }
      for (int j = 0; j < views; ++j) {
        ds[j] = a[j] * (da[j] - dot) * scale;
        dq.col(cols[i]) += ds[j] * cache.k.col(cols[j]);
        dk.col(cols[j]) += ds[j] * cache.q.col(cols[i]);
      }
    }
  });
  const Mat<T>& u = cache.ln.y;
  g.wq->noalias() += dq * u.transpose();
  g.wk->noalias() += dk * u.transpose();
  g.wv->noalias() += dv * u.transpose();
  Mat<T> du(c, dy.data.cols());
  du.noalias() = p.wq->transpose() * dq;
  du.noalias() += p.wk->transpose() * dk;
  du.noalias() += p.wv->transpose() * dv;
  FeatureMap<T> dx(dy.grid, layer_norm_backward(du, cache.ln));
  dx.data += dy.data;
  return dx;
}

}  // namespace mvdiff::nn
