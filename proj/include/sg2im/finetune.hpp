#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/conditioning.hpp"
#include "sg2im/dataset.hpp"
#include "sg2im/denoiser.hpp"
#include "sg2im/diffusion.hpp"
#include "sg2im/graph_encoder.hpp"
#include "sg2im/objectives.hpp"

namespace sg2im {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything trained during diffusion fine-tuning.
template <typename T>
struct SceneModel {
  GraphEncoder<T> encoder;
  ConditioningBuilder<T> conditioning;
  Denoiser<T> denoiser;

  // Shares nodes with the components.
  nn::ParamSet<T> parameters() const {
    nn::ParamSet<T> ps;
    ps.merge(encoder.params(), "encoder.");
    ps.merge(conditioning.params(), "conditioning.");
    ps.merge(denoiser.params(), "denoiser.");
    return ps;
  }
};

template <typename T>
struct ConditionedBatch {
  Var<T> global;  // [B, d_g]
  ConditioningBatch<T> tokens;
};

inline std::vector<std::string> object_labels(const SceneGraph& g, const Vocabulary& vocab) {
  std::vector<std::string> labels;
  for (auto id : g.object_ids) labels.push_back(vocab.objects.label(id));
  return labels;
}

template <typename T>
ConditionedBatch<T> condition_graphs(const SceneModel<T>& model, const std::vector<const SceneGraph*>& graphs,
                                     const Vocabulary& vocab) {
  std::vector<Var<T>> globals;
  std::vector<ConditioningSignal<T>> signals;
  for (const auto* g : graphs) {
    globals.push_back(model.encoder.encode(*g));
    signals.push_back(model.conditioning.build(globals.back(), object_labels(*g, vocab)));
  }
  return {ag::concat<T>(globals, 0), stack_conditioning(signals)};
}

// Encodes each image with the codec and stacks to [B, C, H, W].
template <typename T>
Tensor<T> latent_batch(const std::vector<const Image*>& images, const diffusion::LatentCodec& codec) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  std::vector<Tensor<T>> items;
  for (const auto* im : images) items.push_back(to_chw<T>(codec.encode(*im)));
  const Shape& s = items[0].shape;
  Tensor<T> out(Shape{items.size(), s[0], s[1], s[2]});
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b].shape != s) throw ShapeError("images in a batch differ in shape");
    std::copy(items[b].data.begin(), items[b].data.end(), out.data.begin() + b * items[b].size());
  }
  return out;
}

// Image embeddings memoized by pair id.
class ImageEmbeddingCache {
 public:
  explicit ImageEmbeddingCache(const EmbeddingProvider& provider) : provider_(provider) {}
  const std::vector<double>& get(const ImageGraphPair& p) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(p.pair_id);
    if (it == cache_.end()) it = cache_.emplace(p.pair_id, provider_.embed_image(p.image)).first;
    return it->second;
  }
  const EmbeddingProvider& provider() const { return provider_; }

 private:
  const EmbeddingProvider& provider_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::vector<double>> cache_;
};

template <typename T>
Tensor<T> embedding_rows(const std::vector<const ImageGraphPair*>& pairs, const ImageEmbeddingCache& cache) {
  const std::size_t d = cache.provider().image_dim();
  Tensor<T> out(Shape{pairs.size(), d});
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    const auto& e = cache.get(*pairs[b]);
    if (e.size() != d) throw ShapeError("image embedding width mismatch");
    for (std::size_t k = 0; k < d; ++k) out[b * d + k] = static_cast<T>(e[k]);
  }
  return out;
}

struct LossBreakdown {
  double l_recon = 0, l_clip = 0, l_mmd = 0, l_align = 0, l_train = 0;
  nlohmann::json to_json() const {
    return {{"l_recon", l_recon}, {"l_clip", l_clip}, {"l_mmd", l_mmd}, {"l_align", l_align}, {"l_train", l_train}};
  }
};

struct FinetuneSettings {
  objectives::LossWeights weights;
  objectives::KernelSpec kernel;
};

// Shared, read-only inputs of a fine-tuning run.
struct FinetuneContext {
  const Vocabulary& vocab;
  const ImageEmbeddingCache& image_embeddings;
  const diffusion::NoiseSchedule& schedule;
  const diffusion::LatentCodec& codec;
  FinetuneSettings settings;
};

template <typename T>
void check_finetune_widths(const SceneModel<T>& model, const FinetuneContext& ctx) {
  const std::size_t d_g = model.encoder.config().d_g, d_img = ctx.image_embeddings.provider().image_dim();
  if (d_g != d_img)
    throw ShapeError("graph embedding width " + std::to_string(d_g) + " != image embedding width " +
                     std::to_string(d_img));
  if (model.conditioning.config().d_cond != model.denoiser.config().d_cond)
    throw ShapeError("conditioning width differs from the denoiser's cross-attention width");
}

// One optimizer update of denoiser, encoder and conditioning projections on
// a batch. Timesteps and noise come from `seed`. Returns pre-update losses.
template <typename T>
LossBreakdown train_step(const std::vector<const ImageGraphPair*>& batch, SceneModel<T>& model, nn::Adam<T>& opt,
                         const FinetuneContext& ctx, std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  check_finetune_widths(model, ctx);
  const auto& w = ctx.settings.weights;
  objectives::check_unit_interval(w.lambda, "lambda");
  objectives::check_unit_interval(w.beta, "beta");

  std::vector<const Image*> images;
  std::vector<const SceneGraph*> graphs;
  for (const auto* p : batch) {
    images.push_back(&p->image);
    graphs.push_back(&p->graph);
  }
  const Tensor<T> x0 = latent_batch<T>(images, ctx.codec);
  const std::size_t B = batch.size(), per = x0.size() / B;
  Rng rng(seed);
  std::vector<std::size_t> ts(B);
  Tensor<T> eps(x0.shape), x_t(x0.shape);
  for (std::size_t b = 0; b < B; ++b) {
    ts[b] = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(ctx.schedule.T)));
    const T a = static_cast<T>(ctx.schedule.sqrt_alpha_bar(ts[b]));
    const T s = static_cast<T>(ctx.schedule.sqrt_one_minus_alpha_bar(ts[b]));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      eps[i] = static_cast<T>(rng.normal());
      x_t[i] = a * x0[i] + s * eps[i];
    }
  }

  opt.zero_grad();
  auto cond = condition_graphs(model, graphs, ctx.vocab);
  auto eps_hat = model.denoiser.forward(ag::constant(x_t), ts, cond.tokens);
  auto lr = objectives::l_recon(ag::constant(eps), eps_hat);
  auto img = ag::constant(embedding_rows<T>(batch, ctx.image_embeddings));
  auto lc = objectives::l_clip(cond.global, img);
  auto lm = objectives::mmd2(cond.global, img, ctx.settings.kernel);
  auto la = objectives::l_align(lc, lm, w.beta);
  auto lt = objectives::l_train(lr, la, w.lambda);

  LossBreakdown out;
  out.l_recon = lr.item();
  out.l_clip = lc.item();
  out.l_mmd = lm.item();
  out.l_align = objectives::l_align(out.l_clip, out.l_mmd, w.beta);
  out.l_train = objectives::l_train(out.l_recon, out.l_align, w.lambda);
  if (!std::isfinite(out.l_train)) throw NumericError("non-finite training loss " + std::to_string(out.l_train));
  ag::backward(lt);
  opt.step();
  return out;
}

// Mean noise-prediction error over `draws` seeded (t, eps) draws per item,
// with the given conditioning. No parameters change.
template <typename T>
double noise_prediction_mse(const Denoiser<T>& denoiser, const Tensor<T>& x0, const ConditioningBatch<T>& cond,
                            const diffusion::NoiseSchedule& sched, std::uint64_t seed, std::size_t draws) {
  ag::NoGradGuard guard;
  const std::size_t B = x0.dim(0), per = x0.size() / B;
  double total = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng(derive_seed(seed, d));
    std::vector<std::size_t> ts(B);
    Tensor<T> eps(x0.shape), x_t(x0.shape);
    for (std::size_t b = 0; b < B; ++b) {
      ts[b] = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(sched.T)));
      const T a = static_cast<T>(sched.sqrt_alpha_bar(ts[b])), s = static_cast<T>(sched.sqrt_one_minus_alpha_bar(ts[b]));
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        eps[i] = static_cast<T>(rng.normal());
        x_t[i] = a * x0[i] + s * eps[i];
      }
    }
    total += static_cast<double>(ag::mse(ag::constant(eps), denoiser.forward(ag::constant(x_t), ts, cond)).item());
  }
  return total / static_cast<double>(draws);
}

// DDPM ancestral sampling of one image per conditioning row, decoded and
// clamped to [0, 1].
template <typename T>
std::vector<Image> sample(const ConditioningBatch<T>& cond, const Denoiser<T>& denoiser,
                          const diffusion::LatentCodec& codec, const diffusion::NoiseSchedule& sched, std::uint64_t seed) {
  ag::NoGradGuard guard;
  const auto& c = denoiser.config();
  const std::size_t B = cond.tokens.dim(0);
  diffusion::NoisePredictor<T> predict = [&](const Tensor<T>& x, std::size_t t) {
    return denoiser.forward(ag::constant(x), std::vector<std::size_t>(B, t), cond).value();
  };
  auto latents = diffusion::ancestral_sample<T>(predict, Shape{B, c.channels, c.image_size, c.image_size}, sched, seed);
  return diffusion::decode_batch(latents, codec);
}

}  // namespace sg2im
