#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "sg2im/image.hpp"
#include "sg2im/nn.hpp"
#include "sg2im/rng.hpp"

namespace sg2im {

// Text and image encoders standing in for CLIP. Implementations must return
// unit-norm vectors and be deterministic.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t text_dim() const = 0;
  virtual std::size_t image_dim() const = 0;
  virtual std::string tag() const = 0;
  virtual std::vector<double> embed_text(const std::string& label) const = 0;
  virtual std::vector<double> embed_image(const Image& image) const = 0;
};

inline std::vector<double> normalized(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 1e-300)) {
    std::fill(v.begin(), v.end(), 0.0);
    if (!v.empty()) v[0] = 1.0;
    return v;
  }
  for (double& x : v) x /= n;
  return v;
}

// Text: the label's FNV-1a hash seeds a Gaussian vector. Image: fixed seeded
// random projection of the centred 8x8 bilinear thumbnail plus a fixed offset.
class StubEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit StubEmbeddingProvider(std::size_t text_dim = 512, std::size_t image_dim = 512, std::size_t channels = 3,
                                 std::uint64_t seed = 0x5eed)
      : text_dim_(text_dim), image_dim_(image_dim), channels_(channels), seed_(seed) {
    if (text_dim == 0 || image_dim == 0) throw std::invalid_argument("embedding widths must be positive");
    Rng rng(seed);
    const std::size_t in = 64 * channels;
    proj_.resize(image_dim * in);
    for (auto& w : proj_) w = rng.normal() / std::sqrt(static_cast<double>(in));
    offset_.resize(image_dim);
    for (auto& b : offset_) b = 0.1 * rng.normal() / std::sqrt(static_cast<double>(image_dim));
  }

  std::size_t text_dim() const override { return text_dim_; }
  std::size_t image_dim() const override { return image_dim_; }
  std::string tag() const override { return "stub"; }

  std::vector<double> embed_text(const std::string& label) const override {
    if (label.empty()) throw std::invalid_argument("cannot embed an empty label");
    Rng rng(fnv1a64(label) ^ seed_);
    std::vector<double> v(text_dim_);
    for (auto& x : v) x = rng.normal();
    return normalized(std::move(v));
  }

  std::vector<double> embed_image(const Image& image) const override {
    if (image.channels != channels_)
      throw std::invalid_argument("stub provider expects " + std::to_string(channels_) + " channels");
    const Image small = resize_bilinear(image, 8, 8);
    const std::size_t in = small.data.size();
    std::vector<double> v(image_dim_);
    for (std::size_t o = 0; o < image_dim_; ++o) {
      double s = offset_[o];
      for (std::size_t i = 0; i < in; ++i) s += proj_[o * in + i] * (static_cast<double>(small.data[i]) - 0.5);
      v[o] = s;
    }
    return normalized(std::move(v));
  }

 private:
  std::size_t text_dim_, image_dim_, channels_;
  std::uint64_t seed_;
  std::vector<double> proj_, offset_;
};

// Memoizes text embeddings; safe for concurrent use.
class TextEmbeddingCache {
 public:
  explicit TextEmbeddingCache(const EmbeddingProvider& provider) : provider_(provider) {}
  const std::vector<double>& get(const std::string& label) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(label);
    if (it == cache_.end()) it = cache_.emplace(label, provider_.embed_text(label)).first;
    return it->second;
  }
  const EmbeddingProvider& provider() const { return provider_; }

 private:
  const EmbeddingProvider& provider_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::vector<double>> cache_;
};

inline constexpr const char* kPadToken = "<pad>";

// Graph token followed by per-object label tokens and pad tokens.
template <typename T>
struct ConditioningSignal {
  ag::Var<T> tokens;               // [1 + n_max, d_cond]
  std::vector<std::uint8_t> mask;  // 1 for the graph token and real labels
  std::size_t length() const { return mask.size(); }
};

// Batched form consumed by the denoiser.
template <typename T>
struct ConditioningBatch {
  ag::Var<T> tokens;               // [B, L, d_cond]
  std::vector<std::uint8_t> mask;  // B * L
};

struct ConditioningConfig {
  std::size_t n_max = 10;
  std::size_t d_cond = 512;
  bool operator==(const ConditioningConfig&) const = default;
};

template <typename T>
nn::ParamSet<T> init_conditioning(std::size_t d_g, std::size_t text_dim, const ConditioningConfig& cfg,
                                  std::uint64_t seed) {
  Rng rng(seed);
  nn::ParamSet<T> ps;
  nn::Linear<T>::init(ps, "graph_proj", d_g, cfg.d_cond, rng);
  if (text_dim != cfg.d_cond) nn::Linear<T>::init(ps, "label_proj", text_dim, cfg.d_cond, rng);
  return ps;
}

// Builds S_cond: token 0 is a learned projection of the global graph
// embedding, tokens 1..n are the object label embeddings in graph order
// (projected when the text width differs from d_cond), and the remaining rows
// hold the pad embedding with mask 0.
template <typename T>
class ConditioningBuilder {
 public:
  ConditioningBuilder(ConditioningConfig cfg, nn::ParamSet<T> params, const TextEmbeddingCache& text)
      : cfg_(cfg), params_(std::move(params)), text_(text) {
    graph_proj_ = nn::Linear<T>::bind(params_, "graph_proj");
    if (graph_proj_.out != cfg_.d_cond) throw ShapeError("graph projection width differs from d_cond");
    if (params_.contains("label_proj.weight")) {
      label_proj_ = nn::Linear<T>::bind(params_, "label_proj");
      if (label_proj_.in != text_.provider().text_dim() || label_proj_.out != cfg_.d_cond)
        throw ShapeError("label projection mis-sized");
    } else if (text_.provider().text_dim() != cfg_.d_cond) {
      throw ShapeError("text width differs from d_cond and no label projection is present");
    }
  }

  const ConditioningConfig& config() const { return cfg_; }
  const nn::ParamSet<T>& params() const { return params_; }
  std::size_t length() const { return 1 + cfg_.n_max; }

  // g_global: [1, d_g]
  ConditioningSignal<T> build(const ag::Var<T>& g_global, const std::vector<std::string>& labels) const {
    return build_with_capacity(g_global, labels, cfg_.n_max);
  }

  ConditioningSignal<T> build_with_capacity(const ag::Var<T>& g_global, const std::vector<std::string>& labels,
                                            std::size_t n_max) const {
    if (labels.empty()) throw std::invalid_argument("conditioning needs at least one object label");
    if (labels.size() > n_max)
      throw std::invalid_argument("graph exceeds capacity: " + std::to_string(labels.size()) + " objects > n_max " +
                                  std::to_string(n_max));
    if (g_global.shape() != Shape{1, graph_proj_.in}) throw ShapeError("graph embedding must be [1, d_g]");
    const std::size_t td = text_.provider().text_dim();
    Tensor<T> rows(Shape{n_max, td});
    for (std::size_t i = 0; i < n_max; ++i) {
      const auto& e = text_.get(i < labels.size() ? labels[i] : std::string(kPadToken));
      if (e.size() != td) throw ShapeError("text embedding width mismatch");
      for (std::size_t d = 0; d < td; ++d) rows[i * td + d] = static_cast<T>(e[d]);
    }
    ag::Var<T> label_tokens = ag::constant(std::move(rows));
    if (label_proj_.weight.defined()) label_tokens = label_proj_(label_tokens);
    ConditioningSignal<T> s;
    s.tokens = ag::concat<T>({graph_proj_(g_global), label_tokens}, 0);
    s.mask.assign(1 + n_max, 0);
    for (std::size_t i = 0; i <= labels.size(); ++i) s.mask[i] = 1;
    return s;
  }

 private:
  ConditioningConfig cfg_;
  nn::ParamSet<T> params_;
  const TextEmbeddingCache& text_;
  nn::Linear<T> graph_proj_, label_proj_;
};

template <typename T>
ConditioningBatch<T> stack_conditioning(const std::vector<ConditioningSignal<T>>& signals) {
  if (signals.empty()) throw std::invalid_argument("no conditioning signals to stack");
  std::vector<ag::Var<T>> toks;
  ConditioningBatch<T> b;
  const std::size_t L = signals[0].length(), D = signals[0].tokens.dim(1);
  for (const auto& s : signals) {
    if (s.length() != L) throw ShapeError("conditioning signals differ in length");
    toks.push_back(ag::reshape(s.tokens, {1, L, D}));
    b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
  }
  b.tokens = ag::concat<T>(toks, 0);
  return b;
}

// All-masked conditioning: cross-attention contributes nothing.
template <typename T>
ConditioningBatch<T> null_conditioning(std::size_t batch, std::size_t length, std::size_t d_cond) {
  return {ag::constant(Tensor<T>({batch, length, d_cond})), std::vector<std::uint8_t>(batch * length, 0)};
}

}  // namespace sg2im
