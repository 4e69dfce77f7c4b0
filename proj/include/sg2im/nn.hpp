#pragma once

#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sg2im/ops.hpp"
#include "sg2im/rng.hpp"

namespace sg2im::nn {

using ag::Var;

// Ordered collection of named trainable tensors. Copying a ParamSet shares
// the underlying nodes; use deep_copy() for an independent snapshot.
template <typename T>
class ParamSet {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value) {
    if (params_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    return params_[name] = Var<T>(std::move(value), true);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Var<T> get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }

  Var<T> get(const std::string& name, const Shape& expected) const {
    Var<T> v = get(name);
    if (v.shape() != expected)
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(v.shape()) + ", expected " +
                       shape_str(expected));
    return v;
  }

  const std::map<std::string, Var<T>>& items() const { return params_; }
  std::map<std::string, Var<T>>& items() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    for (const auto& [_, v] : params_) out.push_back(v);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }

  ParamSet deep_copy() const {
    ParamSet out;
    for (const auto& [k, v] : params_) out.add(k, v.value());
    return out;
  }

  // Parameters under `prefix` with the prefix stripped (shares nodes).
  ParamSet subset(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.params_[k.substr(prefix.size())] = v;
    return out;
  }

  // Inserts all of `other` under `prefix` (shares nodes).
  void merge(const ParamSet& other, const std::string& prefix) {
    for (const auto& [k, v] : other.params_) {
      if (params_.count(prefix + k)) throw std::invalid_argument("duplicate parameter '" + prefix + k + "'");
      params_[prefix + k] = v;
    }
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, v] : params_) out.add(k, v.value().template cast<U>());
    return out;
  }

  bool bitwise_equal(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [k, v] : params_) {
      auto it = other.params_.find(k);
      if (it == other.params_.end() || it->second.shape() != v.shape()) return false;
      if (std::memcmp(v.value().ptr(), it->second.value().ptr(), v.size() * sizeof(T)) != 0) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Var<T>> params_;
};

// ---------------------------------------------------------------- init

// U(-a, a) with a = scale / sqrt(fan_in); scale sqrt(6) is He initialization.
template <typename T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  const double bound = scale / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// ---------------------------------------------------------------- layers

// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  Var<T> weight, bias;
  std::size_t in = 0, out = 0;

  static void init(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                   double scale = 1.0, bool with_bias = true) {
    ps.add(name + ".weight", uniform_fan_in<T>({in, out}, in, rng, scale));
    if (with_bias) ps.add(name + ".bias", Tensor<T>({out}));
  }
  static Linear bind(const ParamSet<T>& ps, const std::string& name) {
    Linear l;
    l.weight = ps.get(name + ".weight");
    if (l.weight.shape().size() != 2) throw ShapeError("linear weight '" + name + "' must be a matrix");
    l.in = l.weight.dim(0);
    l.out = l.weight.dim(1);
    if (ps.contains(name + ".bias")) l.bias = ps.get(name + ".bias", {l.out});
    return l;
  }

  // x: [N, in] -> [N, out]
  Var<T> operator()(const Var<T>& x) const {
    auto y = ag::matmul(x, weight);
    return bias.defined() ? ag::add_bias(y, bias) : y;
  }
  // x: [B, L, in] -> [B, L, out]
  Var<T> apply_tokens(const Var<T>& x) const {
    const std::size_t B = x.dim(0), L = x.dim(1);
    return ag::reshape((*this)(ag::reshape(x, {B * L, x.dim(2)})), {B, L, out});
  }
};

// Linear -> ReLU -> Linear, optionally with a trailing ReLU.
template <typename T>
struct Mlp2 {
  Linear<T> first, second;
  bool final_relu = false;

  static void init(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                   Rng& rng, double scale = 1.0) {
    Linear<T>::init(ps, name + ".0", in, hidden, rng, scale);
    Linear<T>::init(ps, name + ".1", hidden, out, rng, scale);
  }
  static Mlp2 bind(const ParamSet<T>& ps, const std::string& name, bool final_relu) {
    Mlp2 m{Linear<T>::bind(ps, name + ".0"), Linear<T>::bind(ps, name + ".1"), final_relu};
    if (m.first.out != m.second.in) throw ShapeError("mlp '" + name + "' inner widths disagree");
    return m;
  }
  Var<T> operator()(const Var<T>& x) const {
    auto y = second(ag::relu(first(x)));
    return final_relu ? ag::relu(y) : y;
  }
};

template <typename T>
struct Conv2d {
  Var<T> weight, bias;
  std::size_t stride = 1, pad = 1;

  static void init(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                   Rng& rng) {
    ps.add(name + ".weight", uniform_fan_in<T>({cout, cin, k, k}, cin * k * k, rng));
    ps.add(name + ".bias", Tensor<T>({cout}));
  }
  static Conv2d bind(const ParamSet<T>& ps, const std::string& name, std::size_t stride = 1) {
    Conv2d c;
    c.weight = ps.get(name + ".weight");
    c.bias = ps.get(name + ".bias", {c.weight.dim(0)});
    c.stride = stride;
    c.pad = c.weight.dim(2) / 2;
    return c;
  }
  std::size_t out_channels() const { return weight.dim(0); }
  Var<T> operator()(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  std::size_t groups = 1;

  static void init(ParamSet<T>& ps, const std::string& name, std::size_t channels) {
    ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    ps.add(name + ".beta", Tensor<T>({channels}));
  }
  static GroupNorm bind(const ParamSet<T>& ps, const std::string& name, std::size_t max_groups) {
    GroupNorm g;
    g.gamma = ps.get(name + ".gamma");
    g.beta = ps.get(name + ".beta", g.gamma.shape());
    const std::size_t c = g.gamma.size();
    g.groups = std::min(max_groups, c);
    while (c % g.groups) --g.groups;
    return g;
  }
  Var<T> operator()(const Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.node()->has_grad()) continue;
      const auto& g = p.node()->grad;
      auto& val = p.mutable_value();
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m_[k][i] / c1, vhat = v_[k][i] / c2;
        val[i] = static_cast<T>(static_cast<double>(val[i]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace sg2im::nn
