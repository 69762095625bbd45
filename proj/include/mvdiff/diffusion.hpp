#pragma once

// DDPM noise schedule, forward corruption, single backward step and the
// construction of (z_t, t, eps) training triples.

#include <cmath>
#include <string>
#include <vector>

#include "mvdiff/error.hpp"
#include "mvdiff/nn/tensor.hpp"
#include "mvdiff/random.hpp"

namespace mvdiff {

enum class SigmaMode { stochastic, deterministic };

inline std::string to_string(SigmaMode m) {
  return m == SigmaMode::stochastic ? "stochastic" : "deterministic";
}

/// Arrays are indexed by timestep 1..T; index 0 holds alpha_bar_0 = 1.
struct DiffusionSchedule {
  int steps = 0;
  double beta_first = 0, beta_last = 0;
  SigmaMode mode = SigmaMode::stochastic;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  /// Linear beta ramp that keeps the schedule shape of the common
  /// 1000-step (1e-4, 0.02) setting when run with fewer steps.
  static DiffusionSchedule scaled_linear(int steps, SigmaMode mode = SigmaMode::stochastic);
};

inline DiffusionSchedule make_schedule(int steps, double beta_first, double beta_last,
                                       SigmaMode mode = SigmaMode::stochastic) {
  if (steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_first > 0.0) || !(beta_first <= beta_last) || !(beta_last < 1.0))
    throw ConfigError("schedule: need 0 < beta_1 <= beta_T < 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.beta_first = beta_first;
  s.beta_last = beta_last;
  s.mode = mode;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  s.sigma.assign(steps + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    s.beta[t] = steps == 1 ? beta_first
                           : beta_first + (beta_last - beta_first) * (t - 1) / double(steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    if (mode == SigmaMode::stochastic)
      s.sigma[t] = std::sqrt(s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]));
  }
  return s;
}

inline DiffusionSchedule DiffusionSchedule::scaled_linear(int steps, SigmaMode mode) {
  const double scale = 1000.0 / steps;
  return make_schedule(steps, std::min(1e-4 * scale, 0.5), std::min(0.02 * scale, 0.999), mode);
}

inline void require_step(const DiffusionSchedule& s, int t) {
  if (t < 1 || t > s.steps)
    throw ConfigError("diffusion: timestep " + std::to_string(t) + " outside [1, " +
                      std::to_string(s.steps) + "]");
}

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
template <class T>
nn::Mat<T> forward_noise(const nn::Mat<T>& z0, int t, const nn::Mat<T>& eps, const DiffusionSchedule& s) {
  require_step(s, t);
  nn::require(z0.rows() == eps.rows() && z0.cols() == eps.cols(), "forward_noise: shape mismatch");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
  return a * z0 + b * eps;
}

/// z_{t-1} = (z_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t eps_new.
/// `eps_new` may be empty when sigma_t is zero.
template <class T>
nn::Mat<T> backward_step(const nn::Mat<T>& zt, int t, const nn::Mat<T>& eps_hat, const nn::Mat<T>& eps_new,
                         const DiffusionSchedule& s) {
  require_step(s, t);
  nn::require(zt.rows() == eps_hat.rows() && zt.cols() == eps_hat.cols(), "backward_step: shape mismatch");
  const T c = static_cast<T>((1.0 - s.alpha[t]) / std::sqrt(1.0 - s.alpha_bar[t]));
  const T inv = static_cast<T>(1.0 / std::sqrt(s.alpha[t]));
  nn::Mat<T> out = (zt - c * eps_hat) * inv;
  if (s.sigma[t] != 0.0) {
    nn::require(eps_new.rows() == zt.rows() && eps_new.cols() == zt.cols(),
                "backward_step: noise draw shape mismatch");
    out += static_cast<T>(s.sigma[t]) * eps_new;
  }
  return out;
}

/// Estimate of z_0 implied by a noise prediction.
template <class T>
nn::Mat<T> predict_x0(const nn::Mat<T>& zt, int t, const nn::Mat<T>& eps_hat, const DiffusionSchedule& s) {
  require_step(s, t);
  const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
  return (zt - b * eps_hat) / a;
}

template <class T>
nn::Mat<T> standard_normal(int rows, int cols, Rng& rng) {
  NormalSampler normal(rng);
  nn::Mat<T> m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(normal());
  return m;
}

inline int sample_timestep(const DiffusionSchedule& s, Rng& rng) {
  return static_cast<int>(uniform_int(rng, 1, s.steps));
}

template <class T>
struct TrainingTriple {
  nn::Mat<T> zt;
  int t = 0;
  nn::Mat<T> eps;
};

/// Uniform t, fresh eps, z_t = forward_noise(z_0, t, eps).
template <class T>
TrainingTriple<T> training_pair(const nn::Mat<T>& z0, const DiffusionSchedule& s, Rng& rng) {
  TrainingTriple<T> out;
  out.t = sample_timestep(s, rng);
  out.eps = standard_normal<T>(static_cast<int>(z0.rows()), static_cast<int>(z0.cols()), rng);
  out.zt = forward_noise(z0, out.t, out.eps, s);
  return out;
}

template <class T>
struct MultiViewTriple {
  nn::Mat<T> zt;
  std::vector<int> t;  // one per instance
  nn::Mat<T> eps;
};

/// Training triple for a block of instances whose columns are stored
/// instance-major (all views of instance 0, then instance 1, ...). Every view
/// of one instance is noised at the same timestep; eps is fresh per view.
template <class T>
MultiViewTriple<T> multiview_training_pair(const nn::Mat<T>& z0, int instances, const DiffusionSchedule& s,
                                           Rng& rng) {
  nn::require(instances >= 1 && z0.cols() % instances == 0, "multiview_training_pair: bad instance count");
  const Eigen::Index per = z0.cols() / instances;
  MultiViewTriple<T> out;
  out.t.resize(instances);
  for (auto& t : out.t) t = sample_timestep(s, rng);
  out.eps = standard_normal<T>(static_cast<int>(z0.rows()), static_cast<int>(z0.cols()), rng);
  out.zt.resize(z0.rows(), z0.cols());
  for (int b = 0; b < instances; ++b) {
    const int t = out.t[b];
    const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
    const T c = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
    out.zt.middleCols(b * per, per) = a * z0.middleCols(b * per, per) + c * out.eps.middleCols(b * per, per);
  }
  return out;
}

}  // namespace mvdiff
