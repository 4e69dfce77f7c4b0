#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/finetune.hpp"
#include "sg2im/graph_encoder.hpp"
#include "sg2im/nn.hpp"
#include "sg2im/objectives.hpp"

namespace sg2im::gca {

using ag::Var;

inline constexpr double kProbEps = 1e-7;

struct DiscriminatorConfig {
  std::size_t in_dim = 512;
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 128;
  double leaky_slope = 0.2;
  double dropout = 0.3;
  double bn_momentum = 0.1;
  bool operator==(const DiscriminatorConfig&) const = default;
};

enum class Mode { kTrain, kEval };

template <typename T>
nn::ParamSet<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  if (cfg.in_dim == 0 || cfg.hidden1 == 0 || cfg.hidden2 == 0) throw std::invalid_argument("discriminator widths must be positive");
  Rng rng(seed);
  nn::ParamSet<T> ps;
  nn::Linear<T>::init(ps, "fc0", cfg.in_dim, cfg.hidden1, rng);
  ps.add("bn0.gamma", Tensor<T>({cfg.hidden1}, T(1)));
  ps.add("bn0.beta", Tensor<T>({cfg.hidden1}));
  nn::Linear<T>::init(ps, "fc1", cfg.hidden1, cfg.hidden2, rng);
  ps.add("bn1.gamma", Tensor<T>({cfg.hidden2}, T(1)));
  ps.add("bn1.beta", Tensor<T>({cfg.hidden2}));
  nn::Linear<T>::init(ps, "fc2", cfg.hidden2, 1, rng);
  return ps;
}

// Running batch-norm statistics, stored like parameters for checkpointing but
// never handed to an optimizer.
template <typename T>
nn::ParamSet<T> init_discriminator_buffers(const DiscriminatorConfig& cfg) {
  nn::ParamSet<T> bs;
  bs.add("bn0.running_mean", Tensor<T>({cfg.hidden1}));
  bs.add("bn0.running_var", Tensor<T>({cfg.hidden1}, T(1)));
  bs.add("bn1.running_mean", Tensor<T>({cfg.hidden2}));
  bs.add("bn1.running_var", Tensor<T>({cfg.hidden2}, T(1)));
  for (auto& [_, v] : bs.items()) v.set_requires_grad(false);
  return bs;
}

// Linear -> BN -> LeakyReLU -> Dropout, twice, then Linear -> Sigmoid.
template <typename T>
class Discriminator {
 public:
  Discriminator(DiscriminatorConfig cfg, nn::ParamSet<T> params, nn::ParamSet<T> buffers)
      : cfg_(cfg), params_(std::move(params)), buffers_(std::move(buffers)) {
    fc0_ = nn::Linear<T>::bind(params_, "fc0");
    fc1_ = nn::Linear<T>::bind(params_, "fc1");
    fc2_ = nn::Linear<T>::bind(params_, "fc2");
    if (fc0_.in != cfg_.in_dim || fc0_.out != cfg_.hidden1 || fc1_.out != cfg_.hidden2 || fc2_.out != 1)
      throw ShapeError("discriminator parameters do not match its configuration");
    for (const char* n : {"bn0", "bn1"}) {
      const std::size_t w = n[2] == '0' ? cfg_.hidden1 : cfg_.hidden2;
      params_.get(std::string(n) + ".gamma", {w});
      params_.get(std::string(n) + ".beta", {w});
      buffers_.get(std::string(n) + ".running_mean", {w});
      buffers_.get(std::string(n) + ".running_var", {w});
    }
  }

  static Discriminator create(const DiscriminatorConfig& cfg, std::uint64_t seed) {
    return Discriminator(cfg, init_discriminator<T>(cfg, seed), init_discriminator_buffers<T>(cfg));
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const nn::ParamSet<T>& buffers() const { return buffers_; }

  // x: [N, in_dim] -> probabilities [N, 1]. Train mode normalizes with batch
  // statistics (folded into the running averages when update_running is set)
  // and applies dropout masks drawn from `seed`.
  Var<T> forward(const Var<T>& x, Mode mode, std::uint64_t seed, bool update_running = true) {
    if (x.shape().size() != 2 || x.dim(1) != cfg_.in_dim)
      throw ShapeError("discriminator expects [N, " + std::to_string(cfg_.in_dim) + "], got " + shape_str(x.shape()));
    Rng rng(seed);
    auto h = block(fc0_(x), "bn0", mode, rng, update_running);
    h = block(fc1_(h), "bn1", mode, rng, update_running);
    return ag::sigmoid(fc2_(h));
  }

  double probability(const std::vector<double>& v, Mode mode, std::uint64_t seed) {
    if (v.size() != cfg_.in_dim)
      throw ShapeError("discriminator input has width " + std::to_string(v.size()) + ", expected " +
                       std::to_string(cfg_.in_dim));
    Tensor<T> t(Shape{1, v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
    ag::NoGradGuard guard;
    return static_cast<double>(forward(ag::constant(std::move(t)), mode, seed, false).item());
  }

 private:
  Var<T> block(const Var<T>& z, const std::string& bn, Mode mode, Rng& rng, bool update_running) {
    auto gamma = params_.get(bn + ".gamma"), beta = params_.get(bn + ".beta");
    auto rm = buffers_.get(bn + ".running_mean"), rv = buffers_.get(bn + ".running_var");
    Var<T> h;
    if (mode == Mode::kTrain) {
      std::vector<T> bm, bv;
      h = ag::batch_norm_train(z, gamma, beta, bm, bv);
      if (update_running) {
        const T m = static_cast<T>(cfg_.bn_momentum);
        auto& mv = rm.mutable_value();
        auto& vv = rv.mutable_value();
        for (std::size_t d = 0; d < bm.size(); ++d) {
          mv[d] = (T(1) - m) * mv[d] + m * bm[d];
          vv[d] = (T(1) - m) * vv[d] + m * bv[d];
        }
      }
    } else {
      const auto& mv = rm.value().data;
      const auto& vv = rv.value().data;
      h = ag::batch_norm_eval(z, gamma, beta, mv, vv);
    }
    h = ag::leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
    if (mode == Mode::kTrain && cfg_.dropout > 0) {
      Tensor<T> mask(h.shape());
      const T keep = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
      for (auto& m : mask.data) m = rng.bernoulli(cfg_.dropout) ? T(0) : keep;
      h = ag::mul_const(h, mask);
    }
    return h;
  }

  DiscriminatorConfig cfg_;
  nn::ParamSet<T> params_, buffers_;
  nn::Linear<T> fc0_, fc1_, fc2_;
};

// ---------------------------------------------------------------- losses

inline void check_probabilities(const std::vector<double>& ps, const char* what) {
  if (ps.empty()) throw std::invalid_argument(std::string(what) + " probabilities are empty");
  for (double p : ps)
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error(std::string(what) + " probability " + std::to_string(p) + " outside (0, 1)");
}

inline double mean_neg_log(const std::vector<double>& ps, bool complement) {
  double s = 0;
  for (double p : ps) s -= std::log(complement ? 1.0 - p : p);
  return s / static_cast<double>(ps.size());
}

// mean(-log p) over discriminator outputs on generated embeddings.
inline double generator_loss(const std::vector<double>& fake) {
  check_probabilities(fake, "fake");
  return mean_neg_log(fake, false);
}

// -mean(log real) - mean(log(1 - fake))
inline double discriminator_loss(const std::vector<double>& real, const std::vector<double>& fake) {
  check_probabilities(real, "real");
  check_probabilities(fake, "fake");
  return mean_neg_log(real, false) + mean_neg_log(fake, true);
}

template <typename T>
Var<T> clamp_prob(const Var<T>& p) {
  return ag::clamp(p, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
}

template <typename T>
Var<T> generator_loss(const Var<T>& fake) {
  return ag::scale(ag::mean(ag::log(clamp_prob(fake))), T(-1));
}

template <typename T>
Var<T> discriminator_loss(const Var<T>& real, const Var<T>& fake) {
  auto lr = ag::mean(ag::log(clamp_prob(real)));
  auto lf = ag::mean(ag::log(ag::add_scalar(ag::scale(clamp_prob(fake), T(-1)), T(1))));
  return ag::scale(ag::add(lr, lf), T(-1));
}

// ---------------------------------------------------------------- training

// How batch normalization sees real and generated rows during training.
// Separate passes normalize each source with its own statistics, which hides
// any mean offset between them from the discriminator; the joint pass
// normalizes the concatenated batch and keeps that offset visible.
enum class NormPass { kSeparate, kJoint };

struct GcaConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t disc_per_gen = 1;                       // discriminator steps per generator step
  std::optional<std::size_t> generator_step_limit;    // unset: no limit
  nn::AdamConfig generator_adam{1e-4, 0.5, 0.999, 1e-8};
  nn::AdamConfig discriminator_adam{2e-4, 0.5, 0.999, 1e-8};
  double holdout_fraction = 0.25;
  std::size_t eval_every = 1;  // epochs between held-out evaluations
  NormPass norm_pass = NormPass::kJoint;
  objectives::KernelSpec kernel;
  std::uint64_t seed = 0;
};

struct GcaRecord {
  std::size_t epoch = 0;
  double d_loss = 0, g_loss = 0;  // epoch means; zero for epoch 0
  std::optional<double> heldout_mmd;
  std::size_t generator_steps = 0;  // cumulative
  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"d_loss", d_loss}, {"g_loss", g_loss}, {"generator_steps", generator_steps}};
    j["heldout_mmd"] = heldout_mmd ? nlohmann::json(*heldout_mmd) : nlohmann::json(nullptr);
    return j;
  }
};

struct GcaResult {
  std::vector<GcaRecord> history;
  std::vector<double> bandwidths;  // frozen at epoch 0 for the held-out MMD
  std::vector<std::size_t> train_indices, heldout_indices;
};

// Deterministic split of pair indices into training and held-out parts.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double holdout_fraction,
                                                                                  std::uint64_t seed) {
  if (!(holdout_fraction >= 0 && holdout_fraction < 1)) throw std::invalid_argument("holdout fraction must lie in [0, 1)");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  std::size_t h = static_cast<std::size_t>(std::round(holdout_fraction * static_cast<double>(n)));
  if (holdout_fraction > 0 && h == 0 && n > 1) h = 1;
  std::vector<std::size_t> held(idx.begin(), idx.begin() + h), train(idx.begin() + h, idx.end());
  std::sort(held.begin(), held.end());
  std::sort(train.begin(), train.end());
  return {train, held};
}

// Trains the graph encoder (generator) against the discriminator in place.
// Each batch takes one discriminator step on real image embeddings versus
// detached encoder outputs; every disc_per_gen-th batch also takes a
// generator step. Held-out MMD^2 uses bandwidths fixed before training.
template <typename T>
GcaResult train_gca(const std::vector<ImageGraphPair>& pairs, GraphEncoder<T>& encoder, Discriminator<T>& disc,
                    const ImageEmbeddingCache& image_embeddings, const GcaConfig& cfg,
                    const std::function<void(const GcaRecord&)>& on_record = {}) {
  const std::size_t d_img = image_embeddings.provider().image_dim();
  if (d_img != disc.config().in_dim || encoder.config().d_g != d_img)
    throw ShapeError("GCA widths disagree: image " + std::to_string(d_img) + ", discriminator " +
                     std::to_string(disc.config().in_dim) + ", encoder " + std::to_string(encoder.config().d_g));
  if (cfg.epochs < 1) throw std::invalid_argument("GCA needs at least one epoch");
  if (cfg.disc_per_gen < 1) throw std::invalid_argument("discriminator/generator ratio must be >= 1");
  if (cfg.batch_size < 2) throw std::invalid_argument("GCA batch size must be >= 2 for batch normalization");
  if (pairs.size() < 2) throw std::invalid_argument("GCA needs at least two pairs");

  GcaResult res;
  std::tie(res.train_indices, res.heldout_indices) = split_indices(pairs.size(), cfg.holdout_fraction, cfg.seed);
  if (res.train_indices.size() < 2) throw std::invalid_argument("GCA training split has fewer than two pairs");

  nn::Adam<T> gen_opt(encoder.params().vars(), cfg.generator_adam);
  nn::Adam<T> disc_opt(disc.params().vars(), cfg.discriminator_adam);

  std::vector<const ImageGraphPair*> held;
  for (auto i : res.heldout_indices) held.push_back(&pairs[i]);
  const Tensor<T> held_img = held.empty() ? Tensor<T>() : embedding_rows<T>(held, image_embeddings);
  auto heldout_mmd = [&]() -> std::optional<double> {
    if (held.empty()) return std::nullopt;
    ag::NoGradGuard guard;
    std::vector<const SceneGraph*> gs;
    for (const auto* p : held) gs.push_back(&p->graph);
    auto g = encoder.encode_batch(gs);
    if (res.bandwidths.empty()) res.bandwidths = objectives::resolve_bandwidths(cfg.kernel, g.value(), held_img);
    return static_cast<double>(objectives::mmd2(g, ag::constant(held_img), res.bandwidths).item());
  };
  auto emit = [&](const GcaRecord& r) {
    res.history.push_back(r);
    if (on_record) on_record(r);
  };

  GcaRecord r0;
  r0.heldout_mmd = heldout_mmd();
  emit(r0);

  std::size_t gen_steps = 0, batch_counter = 0;
  std::vector<std::size_t> order = res.train_indices;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), erng.engine());
    double d_sum = 0, g_sum = 0;
    std::size_t d_n = 0, g_n = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) start = end - 2;  // keep batch-norm batches at two or more rows
      std::vector<const ImageGraphPair*> batch;
      std::vector<const SceneGraph*> graphs;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&pairs[order[i]]);
        graphs.push_back(&pairs[order[i]].graph);
      }
      const std::uint64_t bseed = derive_seed(derive_seed(cfg.seed, epoch), 1000 + batch_counter);

      // Discriminator step; encoder outputs are detached.
      Tensor<T> fake_value;
      {
        ag::NoGradGuard guard;
        fake_value = encoder.encode_batch(graphs).value();
      }
      disc_opt.zero_grad();
      const auto real = ag::constant(embedding_rows<T>(batch, image_embeddings));
      const std::size_t B = batch.size();
      Var<T> real_p, fake_p;
      if (cfg.norm_pass == NormPass::kJoint) {
        auto p = disc.forward(ag::concat<T>({real, ag::constant(fake_value)}, 0), Mode::kTrain, bseed);
        real_p = ag::slice(p, 0, 0, B);
        fake_p = ag::slice(p, 0, B, B);
      } else {
        real_p = disc.forward(real, Mode::kTrain, bseed);
        fake_p = disc.forward(ag::constant(fake_value), Mode::kTrain, bseed + 1);
      }
      auto dl = discriminator_loss(real_p, fake_p);
      if (!std::isfinite(static_cast<double>(dl.item())))
        throw NumericError("non-finite discriminator loss at epoch " + std::to_string(epoch));
      ag::backward(dl);
      disc_opt.step();
      d_sum += static_cast<double>(dl.item());
      ++d_n;

      const bool gen_turn = (batch_counter % cfg.disc_per_gen) == cfg.disc_per_gen - 1;
      const bool gen_allowed = !cfg.generator_step_limit || gen_steps < *cfg.generator_step_limit;
      if (gen_turn && gen_allowed) {
        gen_opt.zero_grad();
        disc_opt.zero_grad();
        Var<T> p;
        if (cfg.norm_pass == NormPass::kJoint)
          p = ag::slice(disc.forward(ag::concat<T>({real, encoder.encode_batch(graphs)}, 0), Mode::kTrain, bseed + 2, false),
                        0, B, B);
        else
          p = disc.forward(encoder.encode_batch(graphs), Mode::kTrain, bseed + 2, false);
        auto gl = generator_loss(p);
        if (!std::isfinite(static_cast<double>(gl.item())))
          throw NumericError("non-finite generator loss at epoch " + std::to_string(epoch));
        ag::backward(gl);
        gen_opt.step();
        disc_opt.zero_grad();
        g_sum += static_cast<double>(gl.item());
        ++g_n;
        ++gen_steps;
      }
      ++batch_counter;
      if (end == order.size()) break;
    }
    GcaRecord r;
    r.epoch = epoch;
    r.d_loss = d_n ? d_sum / static_cast<double>(d_n) : 0.0;
    r.g_loss = g_n ? g_sum / static_cast<double>(g_n) : 0.0;
    r.generator_steps = gen_steps;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) r.heldout_mmd = heldout_mmd();
    emit(r);
  }
  return res;
}

}  // namespace sg2im::gca
