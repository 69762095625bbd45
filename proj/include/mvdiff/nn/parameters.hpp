#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvdiff/nn/network_config.hpp"
#include "mvdiff/nn/tensor.hpp"
#include "mvdiff/random.hpp"

namespace mvdiff::nn {

/// `backbone` stands in for pretrained weights; `fresh` holds the layers
/// added on top (ray modulation heads, view attention), which train with a
/// larger learning rate.
enum class ParamGroup { backbone, fresh };

inline const char* to_string(ParamGroup g) { return g == ParamGroup::backbone ? "backbone" : "new"; }

enum class Init { fan_in, zero };

template <class T>
struct Param {
  std::string name;
  ParamGroup group = ParamGroup::backbone;
  Init init = Init::fan_in;
  int fan_in = 1;
  Mat<T> value;  // rows × cols; biases are n × 1
};

template <class T>
class Parameters {
 public:
  NetworkConfig config;

  int add(const std::string& name, int rows, int cols, ParamGroup group, Init init, int fan_in) {
    if (index_.count(name)) throw ConfigError("parameters: duplicate tensor '" + name + "'");
    index_[name] = static_cast<int>(tensors_.size());
    tensors_.push_back({name, group, init, fan_in, Mat<T>::Zero(rows, cols)});
    return static_cast<int>(tensors_.size()) - 1;
  }

  size_t size() const { return tensors_.size(); }
  Param<T>& operator[](size_t i) { return tensors_[i]; }
  const Param<T>& operator[](size_t i) const { return tensors_[i]; }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  Mat<T>& at(const std::string& name) {
    const int i = find(name);
    if (i < 0) throw ConfigError("parameters: no tensor '" + name + "'");
    return tensors_[i].value;
  }
  const Mat<T>& at(const std::string& name) const {
    const int i = find(name);
    if (i < 0) throw ConfigError("parameters: no tensor '" + name + "'");
    return tensors_[i].value;
  }

  size_t count() const {
    size_t n = 0;
    for (const auto& p : tensors_) n += static_cast<size_t>(p.value.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& p : tensors_)
      if (!p.value.allFinite()) return false;
    return true;
  }

  /// Deterministic per (seed, tensor name): the same name gets the same values
  /// whatever else the network contains.
  void initialize(std::uint64_t seed) {
    for (auto& p : tensors_) {
      if (p.init == Init::zero || is_bias(p.name)) {
        p.value.setZero();
        continue;
      }
      Rng rng = make_rng(seed, {hash_name(p.name)});
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
      for (Eigen::Index j = 0; j < p.value.cols(); ++j)
        for (Eigen::Index i = 0; i < p.value.rows(); ++i)
          p.value(i, j) = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    }
  }

  /// Zero-valued tensors with the same layout (gradient / optimizer state).
  std::vector<Mat<T>> zeros_like() const {
    std::vector<Mat<T>> out;
    out.reserve(tensors_.size());
    for (const auto& p : tensors_) out.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    return out;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    for (const auto& p : tensors_) {
      const int i = out.add(p.name, static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()), p.group,
                            p.init, p.fan_in);
      out[i].value = p.value.template cast<U>();
    }
    return out;
  }

  static bool is_bias(const std::string& name) { return name.size() >= 2 && name.substr(name.size() - 2) == ".b"; }

 private:
  std::vector<Param<T>> tensors_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace mvdiff::nn
