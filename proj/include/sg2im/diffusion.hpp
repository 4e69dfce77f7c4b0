#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sg2im/image.hpp"
#include "sg2im/rng.hpp"
#include "sg2im/tensor.hpp"

namespace sg2im::diffusion {

// Timesteps are 1-based: index t - 1 of each vector holds step t.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas, alphas, alpha_bar;

  double sqrt_alpha_bar(std::size_t t) const { return std::sqrt(alpha_bar.at(t - 1)); }
  double sqrt_one_minus_alpha_bar(std::size_t t) const { return std::sqrt(1.0 - alpha_bar.at(t - 1)); }
  double beta(std::size_t t) const { return betas.at(t - 1); }
  double alpha(std::size_t t) const { return alphas.at(t - 1); }
  // Ancestral sampling noise scale.
  double sigma(std::size_t t) const { return std::sqrt(betas.at(t - 1)); }
};

// Linear betas from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(std::size_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw std::invalid_argument("schedule needs at least one timestep");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

inline void check_timestep(const NoiseSchedule& s, std::size_t t) {
  if (t < 1 || t > s.T)
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(x0.shape, eps.shape, "q_sample");
  check_timestep(s, t);
  const T a = static_cast<T>(s.sqrt_alpha_bar(t)), b = static_cast<T>(s.sqrt_one_minus_alpha_bar(t));
  Tensor<T> out(x0.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Inverts q_sample given the true noise.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& x_t, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(x_t.shape, eps.shape, "predict_x0");
  check_timestep(s, t);
  const double a = s.sqrt_alpha_bar(t), b = s.sqrt_one_minus_alpha_bar(t);
  Tensor<T> out(x_t.shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((static_cast<double>(x_t[i]) - b * eps[i]) / a);
  return out;
}

template <typename T>
Tensor<T> gaussian(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

// ---------------------------------------------------------------- latent codec

// Maps images to and from the space the denoiser works in.
class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual std::string name() const = 0;
  virtual Image encode(const Image& img) const = 0;
  virtual Image decode(const Image& latent) const = 0;
};

class IdentityCodec final : public LatentCodec {
 public:
  std::string name() const override { return "identity"; }
  Image encode(const Image& img) const override { return img; }
  Image decode(const Image& latent) const override { return latent; }
};

// latent = scale * x + shift. scale=2, shift=-1 centres [0, 1] pixels on zero.
class AffineCodec final : public LatentCodec {
 public:
  AffineCodec(float scale = 2.f, float shift = -1.f) : scale_(scale), shift_(shift) {
    if (scale == 0.f) throw std::invalid_argument("affine codec scale must be non-zero");
  }
  std::string name() const override { return "affine"; }
  Image encode(const Image& img) const override {
    Image out = img;
    for (auto& v : out.data) v = scale_ * v + shift_;
    return out;
  }
  Image decode(const Image& latent) const override {
    Image out = latent;
    for (auto& v : out.data) v = (v - shift_) / scale_;
    return out;
  }

 private:
  float scale_, shift_;
};

inline std::unique_ptr<LatentCodec> make_codec(const std::string& name) {
  if (name == "identity") return std::make_unique<IdentityCodec>();
  if (name == "affine" || name == "centered") return std::make_unique<AffineCodec>();
  throw std::invalid_argument("unknown latent codec '" + name + "'");
}

// ---------------------------------------------------------------- sampling

// Noise prediction for a whole batch x_t [B, C, H, W] at one timestep.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& x_t, std::size_t t)>;

// DDPM ancestral sampling from seeded Gaussian noise. Returns the final
// latent batch before decoding.
template <typename T>
Tensor<T> ancestral_sample(const NoisePredictor<T>& predict, Shape shape, const NoiseSchedule& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> x = gaussian<T>(shape, rng);
  for (std::size_t t = s.T; t >= 1; --t) {
    const Tensor<T> eps = predict(x, t);
    require_same_shape(eps.shape, x.shape, "noise prediction");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double coef = s.beta(t) / s.sqrt_one_minus_alpha_bar(t);
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<T>(inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i])));
    if (t > 1) {
      const double sigma = s.sigma(t);
      for (auto& v : x.data) v = static_cast<T>(static_cast<double>(v) + sigma * rng.normal());
    }
  }
  return x;
}

// Decodes each batch item and clamps to [0, 1].
template <typename T>
std::vector<Image> decode_batch(const Tensor<T>& latents, const LatentCodec& codec) {
  std::vector<Image> out;
  for (std::size_t n = 0; n < latents.dim(0); ++n) out.push_back(clamp01(codec.decode(from_chw(latents, n))));
  return out;
}

}  // namespace sg2im::diffusion
