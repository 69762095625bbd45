#pragma once

// Adam with decoupled weight decay; the `new` parameter group steps with a
// multiplied learning rate.

#include <cmath>
#include <vector>

#include "mvdiff/nn/parameters.hpp"

namespace mvdiff::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double new_multiplier = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // not applied to biases
  bool freeze_backbone = false;
};

template <class T>
class AdamW {
 public:
  AdamW(const Parameters<T>& params, AdamWConfig cfg) : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()) {}

  double lr(ParamGroup g) const { return g == ParamGroup::fresh ? cfg_.lr * cfg_.new_multiplier : cfg_.lr; }
  int steps() const { return steps_; }
  const AdamWConfig& config() const { return cfg_; }

  void step(Parameters<T>& params, const std::vector<Mat<T>>& grads) {
    require(grads.size() == params.size(), "adamw: gradient count does not match parameters");
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, steps_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, steps_);
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (cfg_.freeze_backbone && p.group == ParamGroup::backbone) continue;
      require(grads[i].rows() == p.value.rows() && grads[i].cols() == p.value.cols(),
              "adamw: gradient shape mismatch for " + p.name);
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      m_[i] = b1 * m_[i] + (T(1) - b1) * grads[i];
      v_[i] = b2 * v_[i] + (T(1) - b2) * grads[i].cwiseAbs2();
      const double lr = this->lr(p.group);
      if (cfg_.weight_decay > 0 && !Parameters<T>::is_bias(p.name))
        p.value *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
      const T step = static_cast<T>(lr / c1);
      const T inv_c2 = static_cast<T>(1.0 / c2);
      const T eps = static_cast<T>(cfg_.eps);
      p.value.array() -= step * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  int steps_ = 0;
};

}  // namespace mvdiff::nn
