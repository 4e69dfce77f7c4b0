#include <gtest/gtest.h>

#include "support.hpp"

using namespace sg2im;
using namespace testing_support;
using diffusion::make_schedule;

namespace {

DenoiserConfig tiny_denoiser(std::size_t d_cond) {
  DenoiserConfig c;
  c.channels = 2;
  c.image_size = 8;
  c.base_width = 8;
  c.groups = 4;
  c.d_cond = d_cond;
  return c;
}

// Toy pairs plus every component needed for a fine-tuning step.
template <typename T>
struct ModelFixture {
  Dataset data;
  StubEmbeddingProvider provider;
  TextEmbeddingCache text{provider};
  ImageEmbeddingCache images{provider};
  diffusion::NoiseSchedule schedule = make_schedule(50, 1e-4, 0.05);
  diffusion::AffineCodec codec;
  SceneModel<T> model;

  explicit ModelFixture(std::size_t n_max = 3, std::size_t d = 8)
      : data(toy::generate_toy_dataset(corpus(), 2)),
        provider(d, d),
        model{GraphEncoder<T>::create(small_encoder_config(data.vocab, d), 1),
              ConditioningBuilder<T>({n_max, d}, init_conditioning<T>(d, d, {n_max, d}, 2), text),
              Denoiser<T>::create(denoiser_config(d), 3)} {}

  static toy::CorpusConfig corpus() {
    toy::CorpusConfig c;
    c.count = 6;
    c.image_size = 16;
    c.min_objects = c.max_objects = 2;
    c.min_extent = 0.35;
    c.max_extent = 0.45;
    return c;
  }

  static DenoiserConfig denoiser_config(std::size_t d) {
    DenoiserConfig c;
    c.image_size = 16;
    c.base_width = 8;
    c.groups = 4;
    c.d_cond = d;
    return c;
  }

  FinetuneContext context(FinetuneSettings s = {}) const { return {data.vocab, images, schedule, codec, s}; }

  std::vector<const ImageGraphPair*> batch(std::size_t n) const {
    std::vector<const ImageGraphPair*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&data.pairs[i]);
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------- schedule

TEST(Schedule, DefaultIsStrictlyDecreasingAndNearlyDestroysSignal) {
  auto s = make_schedule();
  ASSERT_EQ(s.T, 1000u);
  ASSERT_EQ(s.alpha_bar.size(), 1000u);
  for (std::size_t t = 1; t < s.T; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  EXPECT_LT(s.alpha_bar.back(), 0.01);
  EXPECT_NEAR(s.alpha_bar[0], 0.9999, 1e-15);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-15);
}

TEST(Schedule, AlphaBarIsRunningProductOfAlphas) {
  auto s = make_schedule(37, 1e-3, 0.1);
  double prod = 1;
  for (std::size_t t = 1; t <= s.T; ++t) {
    EXPECT_NEAR(s.alpha(t), 1 - s.beta(t), 1e-15);
    prod *= 1 - s.beta(t);
    EXPECT_NEAR(s.alpha_bar[t - 1], prod, 1e-14);
    EXPECT_NEAR(s.sigma(t) * s.sigma(t), s.beta(t), 1e-15);
  }
}

TEST(Schedule, SingleStep) {
  auto s = make_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.alpha_bar.size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.5);
}

TEST(Schedule, RejectsInvalidRanges) {
  EXPECT_THROW(make_schedule(0), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

// ---------------------------------------------------------------- forward process

TEST(QSample, EndpointsRecoverSignalOrNoise) {
  auto x0 = random_tensor<double>({3, 4}, 1), eps = random_tensor<double>({3, 4}, 2);
  auto nearly_clean = make_schedule(1, 1e-12, 1e-12);
  auto xt = diffusion::q_sample(x0, 1, eps, nearly_clean);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt[i], x0[i], 1e-5);

  auto destroyed = make_schedule(200, 0.5, 0.5);  // alpha_bar = 2^-200
  xt = diffusion::q_sample(x0, 200, eps, destroyed);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt[i], eps[i], 1e-12);
}

TEST(QSample, MatchesMarginalMoments) {
  auto s = make_schedule(100, 1e-3, 0.05);
  const std::size_t t = 60, n = 100000;
  Tensor<double> x0(Shape{n});
  std::fill(x0.data.begin(), x0.data.end(), 0.8);
  Rng rng(5);
  auto eps = diffusion::gaussian<double>({n}, rng);
  auto xt = diffusion::q_sample(x0, t, eps, s);
  double mean = 0, var = 0;
  for (auto v : xt.data) mean += v;
  mean /= n;
  for (auto v : xt.data) var += (v - mean) * (v - mean);
  var /= n - 1;
  const double ab = s.alpha_bar[t - 1];
  EXPECT_NEAR(mean, std::sqrt(ab) * 0.8, 0.02 * std::sqrt(1 - ab));
  EXPECT_NEAR(var / (1 - ab), 1.0, 0.02);
}

TEST(QSample, RejectsOutOfRangeTimestepAndShapeMismatch) {
  auto s = make_schedule(10);
  auto x0 = random_tensor<double>({2, 2}, 1);
  EXPECT_THROW(diffusion::q_sample(x0, 0, x0, s), std::out_of_range);
  EXPECT_THROW(diffusion::q_sample(x0, 11, x0, s), std::out_of_range);
  EXPECT_THROW(diffusion::q_sample(x0, 1, random_tensor<double>({4}, 2), s), ShapeError);
}

TEST(QSample, PredictX0InvertsForwardProcess) {
  auto s = make_schedule();
  auto x0 = random_tensor<double>({2, 3, 4, 4}, 1), eps = random_tensor<double>({2, 3, 4, 4}, 2);
  for (std::size_t t : {1, 250, 999}) {
    auto back = diffusion::predict_x0(diffusion::q_sample(x0, t, eps, s), t, eps, s);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(back[i], x0[i], 1e-10) << "t=" << t;
  }
}

// ---------------------------------------------------------------- codecs

TEST(Codec, RoundTrips) {
  auto img = random_image(5, 4, 3, 1);
  for (const char* name : {"identity", "affine", "centered"}) {
    auto c = diffusion::make_codec(name);
    auto back = c->decode(c->encode(img));
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6) << name;
  }
  diffusion::AffineCodec affine;
  auto enc = affine.encode(img);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(enc.data[i], 2 * img.data[i] - 1, 1e-6);
  EXPECT_THROW(diffusion::make_codec("vae"), std::invalid_argument);
  EXPECT_THROW(diffusion::AffineCodec(0.f, 1.f), std::invalid_argument);
}

// ---------------------------------------------------------------- denoiser

TEST(Denoiser, OutputShapeMatchesInput) {
  DenoiserConfig cfg;
  cfg.d_cond = 16;
  auto net = Denoiser<float>::create(cfg, 1);
  auto x = ag::constant(random_tensor<float>({2, 3, 32, 32}, 2));
  auto cond = null_conditioning<float>(2, 4, 16);
  cond.tokens = ag::constant(random_tensor<float>({2, 4, 16}, 3));
  std::fill(cond.mask.begin(), cond.mask.end(), 1);
  auto y = net.forward(x, {10, 500}, cond);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 32, 32}));
  for (auto v : y.value().data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Denoiser, DeterministicAndConditioningSensitive) {
  auto cfg = tiny_denoiser(6);
  auto a = Denoiser<double>::create(cfg, 7), b = Denoiser<double>::create(cfg, 7);
  EXPECT_TRUE(a.params().bitwise_equal(b.params()));
  auto x = ag::constant(random_tensor<double>({1, 2, 8, 8}, 1));
  ConditioningBatch<double> c1{ag::constant(random_tensor<double>({1, 3, 6}, 2)), {1, 1, 1}};
  ConditioningBatch<double> c2{ag::constant(random_tensor<double>({1, 3, 6}, 3)), {1, 1, 1}};
  auto y1 = a.forward(x, {4}, c1).value(), y1b = b.forward(x, {4}, c1).value(), y2 = a.forward(x, {4}, c2).value();
  EXPECT_EQ(y1.data, y1b.data);
  double diff = 0;
  for (std::size_t i = 0; i < y1.size(); ++i) diff = std::max(diff, std::abs(y1[i] - y2[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Denoiser, TimestepChangesOutput) {
  auto net = Denoiser<double>::create(tiny_denoiser(6), 7);
  auto x = ag::constant(random_tensor<double>({1, 2, 8, 8}, 1));
  ConditioningBatch<double> c{ag::constant(random_tensor<double>({1, 3, 6}, 2)), {1, 1, 1}};
  auto y1 = net.forward(x, {1}, c).value(), y2 = net.forward(x, {40}, c).value();
  EXPECT_NE(y1.data, y2.data);
}

TEST(Denoiser, PaddingDoesNotChangeOutput) {
  ModelFixture<double> f(3);
  const auto& g = f.data.pairs[0].graph;
  auto global = f.model.encoder.encode(g);
  auto labels = object_labels(g, f.data.vocab);
  auto short_cond = stack_conditioning<double>({f.model.conditioning.build(global, labels)});
  auto long_cond = stack_conditioning<double>({f.model.conditioning.build_with_capacity(global, labels, 9)});
  ASSERT_EQ(long_cond.tokens.dim(1), 10u);
  auto x = ag::constant(random_tensor<double>({1, 3, 16, 16}, 4));
  auto a = f.model.denoiser.forward(x, {7}, short_cond).value();
  auto b = f.model.denoiser.forward(x, {7}, long_cond).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Denoiser, RejectsMismatchedInputs) {
  auto net = Denoiser<double>::create(tiny_denoiser(6), 1);
  ConditioningBatch<double> ok{ag::constant(random_tensor<double>({1, 2, 6}, 2)), {1, 1}};
  ConditioningBatch<double> wide{ag::constant(random_tensor<double>({1, 2, 7}, 2)), {1, 1}};
  auto x = ag::constant(random_tensor<double>({1, 2, 8, 8}, 1));
  EXPECT_THROW(net.forward(x, {1}, wide), ShapeError);
  EXPECT_THROW(net.forward(ag::constant(random_tensor<double>({1, 3, 8, 8}, 1)), {1}, ok), ShapeError);
  EXPECT_THROW(net.forward(ag::constant(random_tensor<double>({1, 2, 6, 6}, 1)), {1}, ok), ShapeError);
  EXPECT_THROW(net.forward(x, {1, 2}, ok), ShapeError);
  auto cfg = tiny_denoiser(6);
  cfg.image_size = 6;
  EXPECT_THROW(check_denoiser_config(cfg), std::invalid_argument);
  EXPECT_THROW(Denoiser<double>(tiny_denoiser(6), init_denoiser<double>(DenoiserConfig{}, 1)), ShapeError);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  const auto v = small_vocab();
  StubEmbeddingProvider provider(5, 5);
  TextEmbeddingCache text(provider);
  auto enc_ps = init_graph_encoder<double>(small_encoder_config(v, 5), 1);
  auto cond_ps = init_conditioning<double>(5, 5, {3, 6}, 2);
  auto den_ps = init_denoiser<double>(tiny_denoiser(6), 3);
  jitter_biases(enc_ps, 4);
  GraphEncoder<double> enc(small_encoder_config(v, 5), enc_ps);
  ConditioningBuilder<double> builder({3, 6}, cond_ps, text);
  Denoiser<double> net(tiny_denoiser(6), den_ps);
  const auto g = three_node_graph(v);
  const std::vector<std::string> labels{"red square", "blue circle", "green triangle"};
  const auto x = random_tensor<double>({1, 2, 8, 8}, 5), eps = random_tensor<double>({1, 2, 8, 8}, 6);
  auto loss = [&] {
    auto cond = stack_conditioning<double>({builder.build(enc.encode(g), labels)});
    return objectives::l_recon(ag::constant(eps), net.forward(ag::constant(x), {3}, cond));
  };
  auto params = named(den_ps, "denoiser.");
  for (auto& p : named(enc_ps, "encoder.")) params.push_back(p);
  for (auto& p : named(cond_ps, "conditioning.")) params.push_back(p);
  auto r = gradcheck(params, loss, 1e-5, 6);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
  EXPECT_GT(r.checked, 100u);
}

// ---------------------------------------------------------------- fine-tuning step

TEST(TrainStep, LambdaOneIsPureReconstruction) {
  ModelFixture<double> f;
  nn::Adam<double> opt(f.model.parameters().vars(), {});
  FinetuneSettings s;
  s.weights.lambda = 1.0;
  auto l = train_step(f.batch(3), f.model, opt, f.context(s), 11);
  EXPECT_DOUBLE_EQ(l.l_train, l.l_recon);
  EXPECT_NEAR(l.l_align, s.weights.beta * l.l_clip + (1 - s.weights.beta) * l.l_mmd, 1e-12);
  EXPECT_GT(l.l_recon, 0);
}

TEST(TrainStep, SameSeedGivesIdenticalLossesAndParameters) {
  ModelFixture<double> a, b;
  nn::Adam<double> oa(a.model.parameters().vars(), {1e-3}), ob(b.model.parameters().vars(), {1e-3});
  const auto before = a.model.parameters().deep_copy();
  for (std::uint64_t step = 0; step < 2; ++step) {
    auto la = train_step(a.batch(4), a.model, oa, a.context(), step);
    auto lb = train_step(b.batch(4), b.model, ob, b.context(), step);
    EXPECT_EQ(la.to_json(), lb.to_json());
  }
  EXPECT_TRUE(a.model.parameters().bitwise_equal(b.model.parameters()));
  EXPECT_FALSE(a.model.parameters().bitwise_equal(before));
}

TEST(TrainStep, UpdatesEncoderConditioningAndDenoiser) {
  ModelFixture<double> f;
  nn::Adam<double> opt(f.model.parameters().vars(), {1e-3});
  const auto enc = f.model.encoder.params().deep_copy(), cond = f.model.conditioning.params().deep_copy(),
             den = f.model.denoiser.params().deep_copy();
  train_step(f.batch(4), f.model, opt, f.context(), 1);
  EXPECT_FALSE(f.model.encoder.params().bitwise_equal(enc));
  EXPECT_FALSE(f.model.conditioning.params().bitwise_equal(cond));
  EXPECT_FALSE(f.model.denoiser.params().bitwise_equal(den));
}

TEST(TrainStep, RejectsBadWeightsAndEmptyBatch) {
  ModelFixture<double> f;
  nn::Adam<double> opt(f.model.parameters().vars(), {});
  FinetuneSettings s;
  s.weights.lambda = 1.5;
  EXPECT_THROW(train_step(f.batch(2), f.model, opt, f.context(s), 1), std::invalid_argument);
  EXPECT_THROW(train_step({}, f.model, opt, f.context(), 1), std::invalid_argument);
}

TEST(NoisePredictionMse, IsDeterministicAndLeavesParametersAlone) {
  ModelFixture<double> f;
  std::vector<const Image*> ims{&f.data.pairs[0].image, &f.data.pairs[1].image};
  auto x0 = latent_batch<double>(ims, f.codec);
  auto cond = null_conditioning<double>(2, 4, 8);
  const auto before = f.model.denoiser.params().deep_copy();
  const double a = noise_prediction_mse(f.model.denoiser, x0, cond, f.schedule, 3, 2);
  const double b = noise_prediction_mse(f.model.denoiser, x0, cond, f.schedule, 3, 2);
  EXPECT_EQ(a, b);
  EXPECT_GT(a, 0);
  EXPECT_TRUE(f.model.denoiser.params().bitwise_equal(before));
}

// ---------------------------------------------------------------- sampling

TEST(Sampling, SingleStepWithZeroPredictorHasClosedForm) {
  auto s = make_schedule(1, 0.5, 0.5);
  diffusion::NoisePredictor<double> zero = [](const Tensor<double>& x, std::size_t) {
    return Tensor<double>(x.shape);
  };
  auto out = diffusion::ancestral_sample<double>(zero, {2, 1, 3, 3}, s, 42);
  Rng rng(42);
  auto z = diffusion::gaussian<double>({2, 1, 3, 3}, rng);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(out[i], z[i] / std::sqrt(0.5), 1e-12);
  diffusion::IdentityCodec id;
  auto imgs = diffusion::decode_batch(out, id);
  ASSERT_EQ(imgs.size(), 2u);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i)
      EXPECT_NEAR(imgs[n].data[i], std::clamp(z[n * 9 + i] / std::sqrt(0.5), 0.0, 1.0), 1e-6);
}

TEST(Sampling, PerfectPredictorRecoversSignalWithoutNoiseInjection) {
  // With T=1 and the true noise, one reverse step is exact.
  auto s = make_schedule(1, 0.3, 0.3);
  Rng rng(9);
  auto z = diffusion::gaussian<double>({1, 1, 2, 2}, rng);
  const double target = 0.25;
  diffusion::NoisePredictor<double> oracle = [&](const Tensor<double>& x, std::size_t t) {
    Tensor<double> e(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) e[i] = (x[i] - s.sqrt_alpha_bar(t) * target) / s.sqrt_one_minus_alpha_bar(t);
    return e;
  };
  auto out = diffusion::ancestral_sample<double>(oracle, {1, 1, 2, 2}, s, 9);
  for (auto v : out.data) EXPECT_NEAR(v, target, 1e-12);
}

TEST(Sampling, DeterministicPerSeedWithCorrectSize) {
  ModelFixture<double> f;
  f.schedule = make_schedule(5, 1e-3, 0.2);
  auto cond = condition_graphs(f.model, {&f.data.pairs[0].graph, &f.data.pairs[1].graph}, f.data.vocab);
  auto a = sample(cond.tokens, f.model.denoiser, f.codec, f.schedule, 3);
  auto b = sample(cond.tokens, f.model.denoiser, f.codec, f.schedule, 3);
  auto c = sample(cond.tokens, f.model.denoiser, f.codec, f.schedule, 4);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].height, 16u);
  EXPECT_EQ(a[0].width, 16u);
  EXPECT_EQ(a[0].channels, 3u);
  EXPECT_EQ(a[0].data, b[0].data);
  EXPECT_NE(a[0].data, c[0].data);
  for (auto v : a[1].data) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
  }
}
