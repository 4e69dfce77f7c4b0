#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sg2im/sg2im.hpp"

namespace testing_support {

using namespace sg2im;

struct GradCheck {
  double max_rel = 0;
  std::string worst;
  std::size_t checked = 0;
};

// Gradients whose norm is below this are compared in absolute terms, since
// central differences carry about 1e-10 of rounding noise.
inline constexpr double kGradFloor = 1e-6;

// Compares backward() against central differences on up to `max_entries`
// seeded entries per tensor. The error of a tensor is
// |analytic - numeric| / max(|analytic|, |numeric|, kGradFloor) over the checked entries.
inline GradCheck gradcheck(const std::vector<std::pair<std::string, ag::Var<double>>>& params,
                           const std::function<ag::Var<double>()>& loss, double h = 1e-6,
                           std::size_t max_entries = 16, std::uint64_t seed = 1) {
  for (auto [_, p] : params) p.zero_grad();
  ag::backward(loss());
  GradCheck out;
  Rng rng(seed);
  for (auto [name, p] : params) {
    const Tensor<double> analytic = p.grad();
    std::vector<std::size_t> idx;
    if (p.size() <= max_entries) {
      for (std::size_t i = 0; i < p.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < max_entries; ++k)
        idx.push_back(static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(p.size()) - 1)));
    }
    double diff = 0, na = 0, nn_ = 0;
    for (auto i : idx) {
      auto& v = p.mutable_value()[i];
      const double orig = v;
      double lp, lm;
      {
        ag::NoGradGuard guard;
        v = orig + h;
        lp = loss().item();
        v = orig - h;
        lm = loss().item();
        v = orig;
      }
      const double num = (lp - lm) / (2 * h);
      diff += (analytic[i] - num) * (analytic[i] - num);
      na += analytic[i] * analytic[i];
      nn_ += num * num;
      ++out.checked;
    }
    const double denom = std::max(std::sqrt(std::max(na, nn_)), kGradFloor);
    const double rel = std::sqrt(diff) / denom;
    if (rel > out.max_rel) out.max_rel = rel, out.worst = name;
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, ag::Var<double>>> named(const nn::ParamSet<T>& ps, const std::string& prefix = "") {
  std::vector<std::pair<std::string, ag::Var<double>>> out;
  for (const auto& [k, v] : ps.items()) out.push_back({prefix + k, v});
  return out;
}

// Zero-initialized biases put ReLU inputs exactly on the kink where central
// differences disagree with any one-sided derivative; this moves them off it.
template <typename T>
void jitter_biases(nn::ParamSet<T>& ps, std::uint64_t seed, double lo = 0.05, double hi = 0.3) {
  Rng rng(seed);
  for (auto& [name, v] : ps.items()) {
    if (!name.ends_with(".bias")) continue;
    auto var = v;
    for (auto& x : var.mutable_value().data) x = static_cast<T>(rng.uniform(lo, hi));
  }
}

inline Vocabulary small_vocab() {
  return spatial_vocabulary({"red square", "blue circle", "green triangle", "yellow square"});
}

// Three nodes, two triplets.
inline SceneGraph three_node_graph(const Vocabulary& v) {
  SceneGraph g;
  g.object_ids = {0, 1, 2};
  g.triplets = {{0, v.relations.id("left of"), 1}, {2, v.relations.id("above"), 1}};
  return g;
}

inline GraphEncoderConfig small_encoder_config(const Vocabulary& v, std::size_t d = 6) {
  GraphEncoderConfig c;
  c.num_objects = v.objects.size();
  c.num_relations = v.relations.size();
  c.d_o = c.d_r = c.hidden = c.d_g = d;
  c.layers = 2;
  return c;
}

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(scale * rng.normal());
  return t;
}

inline Image random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Image im(h, w, c);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform());
  return im;
}

// A run small enough to execute end to end in seconds.
inline RunConfig tiny_run_config() {
  RunConfig c;
  c.data.toy.count = 12;
  c.data.toy.image_size = 16;
  c.data.toy.min_objects = c.data.toy.max_objects = 2;
  c.data.toy.min_extent = 0.3;
  c.data.toy.max_extent = 0.45;
  c.provider.text_dim = c.provider.image_dim = 16;
  c.encoder.d_o = c.encoder.d_r = c.encoder.hidden = c.encoder.d_g = 16;
  c.encoder.layers = 2;
  c.gca.epochs = 2;
  c.gca.batch_size = 4;
  c.gca.hidden1 = 16;
  c.gca.hidden2 = 8;
  c.conditioning.n_max = 3;
  c.conditioning.d_cond = 16;
  c.schedule.T = 10;
  c.schedule.beta_end = 0.2;
  c.denoiser.image_size = 16;
  c.denoiser.base_width = 8;
  c.denoiser.groups = 4;
  c.finetune.steps = 3;
  c.finetune.batch_size = 4;
  c.finetune.lr = 1e-3;
  c.sample.graphs = 4;
  c.sample.per_graph = 2;
  c.metrics.feature_dim = 8;
  return c;
}

}  // namespace testing_support
