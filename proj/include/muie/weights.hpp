#pragma once

#include "muie/autodiff.hpp"
#include "muie/random.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace muie {

/// Named parameter tensors keyed by canonical dotted names
/// (e.g. "enc.0.0.vss.proj_b1.weight"). Iteration is lexicographic.
template <typename Scalar>
class WeightStore {
 public:
  using Map = std::map<std::string, Tensor<Scalar>>;

  void add(const std::string& name, Tensor<Scalar> value) {
    if (!tensors_.emplace(name, std::move(value)).second)
      throw std::invalid_argument("duplicate weight name: " + name);
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor<Scalar>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("missing weight: " + name);
    return it->second;
  }
  Tensor<Scalar>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("missing weight: " + name);
    return it->second;
  }

  std::size_t size() const { return tensors_.size(); }
  std::int64_t parameter_count() const {
    std::int64_t total = 0;
    for (const auto& [name, t] : tensors_) total += t.numel();
    return total;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors_) out.push_back(name);
    return out;
  }

  typename Map::iterator begin() { return tensors_.begin(); }
  typename Map::iterator end() { return tensors_.end(); }
  typename Map::const_iterator begin() const { return tensors_.begin(); }
  typename Map::const_iterator end() const { return tensors_.end(); }

  template <typename Other>
  WeightStore<Other> cast() const {
    WeightStore<Other> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<Other>());
    return out;
  }

 private:
  Map tensors_;
};

/// Weights wrapped as tape-visible variables for one forward pass.
template <typename Scalar>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const WeightStore<Scalar>& store, bool requires_grad) {
    for (const auto& [name, t] : store) vars_.emplace(name, Var<Scalar>(t, requires_grad));
  }
  explicit ParamSet(std::map<std::string, Var<Scalar>> vars) : vars_(std::move(vars)) {}

  const Var<Scalar>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("missing weight: " + name);
    return it->second;
  }
  const std::map<std::string, Var<Scalar>>& vars() const { return vars_; }

 private:
  std::map<std::string, Var<Scalar>> vars_;
};

/// Zero-mean uniform draw with bound 1/sqrt(fan_in).
template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor<Scalar>(shape, rng, -bound, bound);
}

/// Registers "<prefix>.weight" [cout,cin/groups,k,k] and "<prefix>.bias".
template <typename Scalar>
void add_conv(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t cin, std::int64_t cout,
              int kernel, int groups, Rng& rng) {
  const std::int64_t fan_in = cin / groups * kernel * kernel;
  store.add(prefix + ".weight", fan_in_uniform<Scalar>(Shape{cout, cin / groups, kernel, kernel}, fan_in, rng));
  store.add(prefix + ".bias", fan_in_uniform<Scalar>(Shape{cout, 1, 1, 1}, fan_in, rng));
}

template <typename Scalar>
void add_layer_norm(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t channels) {
  store.add(prefix + ".gamma", Tensor<Scalar>(Shape{channels, 1, 1, 1}, Scalar(1)));
  store.add(prefix + ".beta", Tensor<Scalar>(Shape{channels, 1, 1, 1}, Scalar(0)));
}

template <typename Scalar>
struct ConvVars {
  Var<Scalar> weight, bias;
  static ConvVars bind(const ParamSet<Scalar>& p, const std::string& prefix) {
    return {p[prefix + ".weight"], p[prefix + ".bias"]};
  }
};

template <typename Scalar>
struct NormVars {
  Var<Scalar> gamma, beta;
  static NormVars bind(const ParamSet<Scalar>& p, const std::string& prefix) {
    return {p[prefix + ".gamma"], p[prefix + ".beta"]};
  }
};

}  // namespace muie
