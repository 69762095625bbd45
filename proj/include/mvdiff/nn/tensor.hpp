#pragma once

#include <Eigen/Dense>

#include <string>

#include "mvdiff/error.hpp"

namespace mvdiff::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Spatial layout of a stack of feature maps: n images of h×w sites.
/// Site index = (image * h + y) * w + x.
struct Grid {
  int n = 0;
  int h = 0;
  int w = 0;

  int sites() const { return n * h * w; }
  int per_image() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

/// Channels-by-sites feature map. Each column holds the channel vector of one
/// site, so per-site operations (layer norm, view attention, 1x1 maps) touch
/// contiguous memory and convolutions become a single GEMM.
template <class T>
struct FeatureMap {
  Grid grid;
  Mat<T> data;

  FeatureMap() = default;
  FeatureMap(Grid g, int channels) : grid(g), data(Mat<T>::Zero(channels, g.sites())) {}
  FeatureMap(Grid g, Mat<T> d) : grid(g), data(std::move(d)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  int sites() const { return grid.sites(); }

  template <class U>
  FeatureMap<U> cast() const {
    return FeatureMap<U>(grid, data.template cast<U>());
  }
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeMismatch(msg);
}

template <class T>
void require_same(const FeatureMap<T>& a, const FeatureMap<T>& b, const char* who) {
  require(a.grid == b.grid && a.channels() == b.channels(),
          std::string(who) + ": feature map shapes differ");
}

}  // namespace mvdiff::nn
