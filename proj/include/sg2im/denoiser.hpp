#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sg2im/conditioning.hpp"
#include "sg2im/nn.hpp"

namespace sg2im {

using ag::Var;

struct DenoiserConfig {
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t base_width = 32;
  std::vector<std::size_t> mults{1, 2};  // one entry per down stage
  std::size_t d_cond = 512;
  std::size_t groups = 8;
  std::size_t cross_attention_levels = 2;  // counted from the coarsest resolution
  bool self_attention = true;              // at the coarsest resolution
  bool operator==(const DenoiserConfig&) const = default;

  std::size_t time_dim() const { return 4 * base_width; }
  std::size_t levels() const { return mults.size(); }
  std::size_t width(std::size_t level) const { return base_width * mults.at(std::min(level, mults.size() - 1)); }
  // Level index runs 0 (full resolution) .. levels() (bottleneck).
  bool cross_attention_at(std::size_t level) const { return level + cross_attention_levels > levels(); }
};

inline void check_denoiser_config(const DenoiserConfig& c) {
  if (c.channels == 0 || c.base_width == 0 || c.mults.empty() || c.d_cond == 0)
    throw std::invalid_argument("denoiser widths must be positive");
  if (c.image_size % (std::size_t(1) << c.levels()) != 0)
    throw std::invalid_argument("image size " + std::to_string(c.image_size) + " not divisible by 2^" +
                                std::to_string(c.levels()));
}

// Sinusoidal features of each timestep: [B, dim].
template <typename T>
Tensor<T> timestep_features(const std::vector<std::size_t>& ts, std::size_t dim) {
  Tensor<T> out(Shape{ts.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t b = 0; b < ts.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[b * dim + i] = static_cast<T>(std::sin(static_cast<double>(ts[b]) * f));
      out[b * dim + half + i] = static_cast<T>(std::cos(static_cast<double>(ts[b]) * f));
    }
  return out;
}

namespace unet {

template <typename T>
void init_resblock(nn::ParamSet<T>& ps, const std::string& p, std::size_t cin, std::size_t cout, std::size_t tdim,
                   Rng& rng) {
  nn::GroupNorm<T>::init(ps, p + ".norm1", cin);
  nn::Conv2d<T>::init(ps, p + ".conv1", cin, cout, 3, rng);
  nn::Linear<T>::init(ps, p + ".time", tdim, cout, rng);
  nn::GroupNorm<T>::init(ps, p + ".norm2", cout);
  nn::Conv2d<T>::init(ps, p + ".conv2", cout, cout, 3, rng);
  if (cin != cout) nn::Conv2d<T>::init(ps, p + ".skip", cin, cout, 1, rng);
}

template <typename T>
struct ResBlock {
  nn::GroupNorm<T> norm1, norm2;
  nn::Conv2d<T> conv1, conv2, skip;
  nn::Linear<T> time;

  static ResBlock bind(const nn::ParamSet<T>& ps, const std::string& p, std::size_t groups) {
    ResBlock r{nn::GroupNorm<T>::bind(ps, p + ".norm1", groups), nn::GroupNorm<T>::bind(ps, p + ".norm2", groups),
               nn::Conv2d<T>::bind(ps, p + ".conv1"), nn::Conv2d<T>::bind(ps, p + ".conv2"), {},
               nn::Linear<T>::bind(ps, p + ".time")};
    if (ps.contains(p + ".skip.weight")) r.skip = nn::Conv2d<T>::bind(ps, p + ".skip");
    return r;
  }

  // temb_act: silu(time embedding), [B, tdim]
  Var<T> operator()(const Var<T>& x, const Var<T>& temb_act) const {
    auto h = conv1(ag::silu(norm1(x)));
    h = ag::add_per_channel(h, time(temb_act));
    h = conv2(ag::silu(norm2(h)));
    return ag::add(skip.weight.defined() ? skip(x) : x, h);
  }
};

template <typename T>
void init_attention(nn::ParamSet<T>& ps, const std::string& p, std::size_t c, std::size_t kv_dim, Rng& rng) {
  nn::GroupNorm<T>::init(ps, p + ".norm", c);
  nn::Linear<T>::init(ps, p + ".q", c, c, rng);
  nn::Linear<T>::init(ps, p + ".k", kv_dim, c, rng);
  nn::Linear<T>::init(ps, p + ".v", kv_dim, c, rng);
  nn::Linear<T>::init(ps, p + ".out", c, c, rng);
}

// Residual single-head attention from image positions to a key/value
// sequence: the conditioning tokens, or the image itself when none is given.
template <typename T>
struct AttentionBlock {
  nn::GroupNorm<T> norm;
  nn::Linear<T> q, k, v, out;

  static AttentionBlock bind(const nn::ParamSet<T>& ps, const std::string& p, std::size_t groups) {
    return {nn::GroupNorm<T>::bind(ps, p + ".norm", groups), nn::Linear<T>::bind(ps, p + ".q"),
            nn::Linear<T>::bind(ps, p + ".k"), nn::Linear<T>::bind(ps, p + ".v"), nn::Linear<T>::bind(ps, p + ".out")};
  }

  Var<T> operator()(const Var<T>& x, const ConditioningBatch<T>* cond) const {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto tokens = ag::transpose_last2(ag::reshape(norm(x), {B, C, H * W}));  // [B, HW, C]
    Var<T> kv = cond ? cond->tokens : tokens;
    if (kv.dim(2) != k.in)
      throw ShapeError("attention key width " + std::to_string(kv.dim(2)) + " != " + std::to_string(k.in));
    static const std::vector<std::uint8_t> all_valid;
    auto a = ag::attention(q.apply_tokens(tokens), k.apply_tokens(kv), v.apply_tokens(kv),
                           cond ? cond->mask : all_valid);
    auto o = ag::transpose_last2(out.apply_tokens(a));  // [B, C, HW]
    return ag::add(x, ag::reshape(o, {B, C, H, W}));
  }
};

}  // namespace unet

template <typename T>
nn::ParamSet<T> init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
  check_denoiser_config(cfg);
  Rng rng(seed);
  nn::ParamSet<T> ps;
  const std::size_t L = cfg.levels(), td = cfg.time_dim();
  nn::Linear<T>::init(ps, "time.0", cfg.base_width, td, rng);
  nn::Linear<T>::init(ps, "time.1", td, td, rng);
  nn::Conv2d<T>::init(ps, "in_conv", cfg.channels, cfg.width(0), 3, rng);
  std::size_t cur = cfg.width(0);
  for (std::size_t i = 0; i < L; ++i) {
    const std::string p = "down." + std::to_string(i);
    unet::init_resblock(ps, p + ".res", cur, cfg.width(i), td, rng);
    cur = cfg.width(i);
    if (cfg.cross_attention_at(i)) unet::init_attention(ps, p + ".cross", cur, cfg.d_cond, rng);
    nn::Conv2d<T>::init(ps, p + ".downsample", cur, cur, 3, rng);
  }
  unet::init_resblock(ps, "mid.res0", cur, cur, td, rng);
  if (cfg.self_attention) unet::init_attention(ps, "mid.self", cur, cur, rng);
  if (cfg.cross_attention_at(L)) unet::init_attention(ps, "mid.cross", cur, cfg.d_cond, rng);
  unet::init_resblock(ps, "mid.res1", cur, cur, td, rng);
  for (std::size_t i = L; i-- > 0;) {
    const std::string p = "up." + std::to_string(i);
    nn::Conv2d<T>::init(ps, p + ".upsample", cur, cur, 3, rng);
    unet::init_resblock(ps, p + ".res", cur + cfg.width(i), cfg.width(i), td, rng);
    cur = cfg.width(i);
    if (cfg.cross_attention_at(i)) unet::init_attention(ps, p + ".cross", cur, cfg.d_cond, rng);
  }
  nn::GroupNorm<T>::init(ps, "out_norm", cur);
  nn::Conv2d<T>::init(ps, "out_conv", cur, cfg.channels, 3, rng);
  return ps;
}

// U-shaped noise predictor: conv stages with timestep-conditioned residual
// blocks, stride-2 downsampling, nearest upsampling with skip concatenation,
// self-attention at the bottleneck and cross-attention over the conditioning
// tokens at the coarsest resolutions.
template <typename T>
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, nn::ParamSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    check_denoiser_config(cfg_);
    const std::size_t L = cfg_.levels(), g = cfg_.groups;
    time0_ = nn::Linear<T>::bind(params_, "time.0");
    time1_ = nn::Linear<T>::bind(params_, "time.1");
    in_conv_ = nn::Conv2d<T>::bind(params_, "in_conv");
    if (in_conv_.weight.dim(1) != cfg_.channels) throw ShapeError("denoiser input conv channel mismatch");
    for (std::size_t i = 0; i < L; ++i) {
      const std::string p = "down." + std::to_string(i);
      Stage s{unet::ResBlock<T>::bind(params_, p + ".res", g), {}, nn::Conv2d<T>::bind(params_, p + ".downsample", 2)};
      if (cfg_.cross_attention_at(i)) s.cross = unet::AttentionBlock<T>::bind(params_, p + ".cross", g);
      down_.push_back(s);
    }
    mid0_ = unet::ResBlock<T>::bind(params_, "mid.res0", g);
    mid1_ = unet::ResBlock<T>::bind(params_, "mid.res1", g);
    if (cfg_.self_attention) mid_self_ = unet::AttentionBlock<T>::bind(params_, "mid.self", g);
    if (cfg_.cross_attention_at(L)) mid_cross_ = unet::AttentionBlock<T>::bind(params_, "mid.cross", g);
    up_.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
      const std::string p = "up." + std::to_string(i);
      up_[i] = Stage{unet::ResBlock<T>::bind(params_, p + ".res", g), {}, nn::Conv2d<T>::bind(params_, p + ".upsample")};
      if (cfg_.cross_attention_at(i)) up_[i].cross = unet::AttentionBlock<T>::bind(params_, p + ".cross", g);
    }
    out_norm_ = nn::GroupNorm<T>::bind(params_, "out_norm", g);
    out_conv_ = nn::Conv2d<T>::bind(params_, "out_conv");
  }

  static Denoiser create(const DenoiserConfig& cfg, std::uint64_t seed) {
    return Denoiser(cfg, init_denoiser<T>(cfg, seed));
  }
  Denoiser clone() const { return Denoiser(cfg_, params_.deep_copy()); }

  const DenoiserConfig& config() const { return cfg_; }
  const nn::ParamSet<T>& params() const { return params_; }

  // x_t: [B, C, H, W]; one timestep per batch item; cond tokens [B, L, d_cond].
  Var<T> forward(const Var<T>& x_t, const std::vector<std::size_t>& ts, const ConditioningBatch<T>& cond) const {
    if (x_t.shape().size() != 4 || x_t.dim(1) != cfg_.channels)
      throw ShapeError("denoiser input must be [B, " + std::to_string(cfg_.channels) + ", H, W], got " +
                       shape_str(x_t.shape()));
    const std::size_t B = x_t.dim(0);
    const std::size_t div = std::size_t(1) << cfg_.levels();
    if (x_t.dim(2) % div || x_t.dim(3) % div) throw ShapeError("denoiser spatial size must be divisible by " + std::to_string(div));
    if (ts.size() != B) throw ShapeError("one timestep per batch item required");
    if (cond.tokens.shape().size() != 3 || cond.tokens.dim(0) != B || cond.tokens.dim(2) != cfg_.d_cond)
      throw ShapeError("conditioning tokens " + shape_str(cond.tokens.shape()) + " do not match batch " +
                       std::to_string(B) + " and width " + std::to_string(cfg_.d_cond));
    if (cond.mask.size() != B * cond.tokens.dim(1)) throw ShapeError("conditioning mask size mismatch");

    auto temb = time1_(ag::silu(time0_(ag::constant(timestep_features<T>(ts, cfg_.base_width)))));
    auto temb_act = ag::silu(temb);

    auto h = in_conv_(x_t);
    std::vector<Var<T>> skips;
    for (const auto& s : down_) {
      h = s.res(h, temb_act);
      if (s.cross.q.weight.defined()) h = s.cross(h, &cond);
      skips.push_back(h);
      h = s.resample(h);
    }
    h = mid0_(h, temb_act);
    if (mid_self_.q.weight.defined()) h = mid_self_(h, nullptr);
    if (mid_cross_.q.weight.defined()) h = mid_cross_(h, &cond);
    h = mid1_(h, temb_act);
    for (std::size_t i = up_.size(); i-- > 0;) {
      const auto& s = up_[i];
      h = s.resample(ag::upsample2x(h));
      h = s.res(ag::concat<T>({h, skips[i]}, 1), temb_act);
      if (s.cross.q.weight.defined()) h = s.cross(h, &cond);
    }
    return out_conv_(ag::silu(out_norm_(h)));
  }

 private:
  struct Stage {
    unet::ResBlock<T> res;
    unet::AttentionBlock<T> cross;
    nn::Conv2d<T> resample;
  };

  DenoiserConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Linear<T> time0_, time1_;
  nn::Conv2d<T> in_conv_, out_conv_;
  std::vector<Stage> down_, up_;
  unet::ResBlock<T> mid0_, mid1_;
  unet::AttentionBlock<T> mid_self_, mid_cross_;
  nn::GroupNorm<T> out_norm_;
};

}  // namespace sg2im
