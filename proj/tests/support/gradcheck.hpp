#pragma once

// Central finite differences against analytic gradients, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mvdiff/nn/tensor.hpp"
#include "mvdiff/random.hpp"

namespace mvdiff::testing {

using MatD = nn::Mat<double>;

/// Relative error max|a - n| / max(max|n|, floor) over the probed entries.
struct GradCheck {
  double max_abs_err = 0;
  double max_ref = 0;
  int probes = 0;

  double rel() const { return max_abs_err / std::max(max_ref, 1e-8); }
};

/// Probes `count` random entries of `x` (all entries when count <= 0 or
/// larger than x) and compares analytic `grad` with (f(x+h) - f(x-h)) / 2h.
inline GradCheck check_gradient(MatD& x, const MatD& grad, const std::function<double()>& f, Rng& rng,
                                int count = -1, double h = 1e-6) {
  GradCheck r;
  std::vector<Eigen::Index> idx(static_cast<size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) idx[i] = i;
  if (count > 0 && count < x.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
  }
  for (auto i : idx) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double fp = f();
    x.data()[i] = saved - h;
    const double fm = f();
    x.data()[i] = saved;
    const double numeric = (fp - fm) / (2 * h);
    r.max_abs_err = std::max(r.max_abs_err, std::abs(numeric - grad.data()[i]));
    r.max_ref = std::max(r.max_ref, std::abs(numeric));
    ++r.probes;
  }
  return r;
}

inline MatD random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
  return m;
}

/// Scalar objective sum(w ⊙ y) for a fixed random weighting w.
inline double weighted_sum(const MatD& y, const MatD& w) { return y.cwiseProduct(w).sum(); }

}  // namespace mvdiff::testing
