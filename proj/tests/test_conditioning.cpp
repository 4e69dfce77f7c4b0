#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "support.hpp"

using namespace sg2im;
using namespace testing_support;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct Builder {
  StubEmbeddingProvider provider;
  TextEmbeddingCache text{provider};
  ConditioningBuilder<double> builder;

  Builder(std::size_t d_g, std::size_t text_dim, ConditioningConfig cfg, std::uint64_t seed = 2)
      : provider(text_dim, 8), builder(cfg, init_conditioning<double>(d_g, text_dim, cfg, seed), text) {}
};

ag::Var<double> global(std::size_t d, std::uint64_t seed) { return ag::constant(random_tensor<double>({1, d}, seed)); }

std::vector<double> token(const ConditioningSignal<double>& s, std::size_t i) {
  const std::size_t D = s.tokens.dim(1);
  const auto* p = s.tokens.value().ptr() + i * D;
  return {p, p + D};
}

// Serves a stub provider over HTTP on an ephemeral port.
class StubServer {
 public:
  explicit StubServer(std::size_t dim, int fail_first = 0) : stub_(dim, dim), fail_left_(fail_first) {
    server_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      if (fail_left_ > 0) {
        --fail_left_;
        res.status = 503;
        return;
      }
      auto j = nlohmann::json::parse(req.body);
      std::vector<double> v;
      if (j["kind"] == "text") {
        v = stub_.embed_text(j["payload"].get<std::string>());
        for (auto& x : v) x *= 3.0;  // the client normalizes
      } else {
        const auto& p = j["payload"];
        Image im(p["height"], p["width"], p["channels"]);
        im.data = p["data"].get<std::vector<float>>();
        v = stub_.embed_image(im);
      }
      res.set_content(nlohmann::json{{"vector", v}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int hits() const { return hits_; }
  const StubEmbeddingProvider& stub() const { return stub_; }

 private:
  StubEmbeddingProvider stub_;
  httplib::Server server_;
  std::atomic<int> hits_{0};
  std::atomic<int> fail_left_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(StubProvider, TextIsDeterministicAndUnitNorm) {
  StubEmbeddingProvider p;
  EXPECT_EQ(p.embed_text("dog"), p.embed_text("dog"));
  EXPECT_NE(p.embed_text("dog"), p.embed_text("cat"));
  EXPECT_EQ(p.embed_text("dog").size(), 512u);
  EXPECT_NEAR(norm(p.embed_text("dog")), 1.0, 1e-6);
  EXPECT_THROW(p.embed_text(""), std::invalid_argument);
}

TEST(StubProvider, ToyVocabularyEmbeddingsPairwiseDistinct) {
  StubEmbeddingProvider p;
  auto vocab = toy::corpus_vocabulary(toy::CorpusConfig{});
  std::vector<std::string> labels = vocab.objects.labels();
  labels.insert(labels.end(), vocab.relations.labels().begin(), vocab.relations.labels().end());
  labels.push_back(kPadToken);
  std::vector<std::vector<double>> e;
  for (const auto& l : labels) e.push_back(p.embed_text(l));
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_NEAR(norm(e[i]), 1.0, 1e-6);
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < e[i].size(); ++d) dot += e[i][d] * e[j][d];
      EXPECT_LT(std::abs(dot), 0.5) << labels[i] << " vs " << labels[j];
    }
  }
}

TEST(StubProvider, ImageEmbeddings) {
  StubEmbeddingProvider p;
  const Image zeros(16, 16, 3, 0.f), ones(16, 16, 3, 1.f);
  auto a = p.embed_image(zeros), b = p.embed_image(ones);
  EXPECT_EQ(a, p.embed_image(zeros));
  EXPECT_NE(a, b);
  double dot = 0;
  for (std::size_t d = 0; d < a.size(); ++d) dot += a[d] * b[d];
  EXPECT_LT(dot, 0.99);
  EXPECT_NEAR(norm(a), 1.0, 1e-6);
  EXPECT_NEAR(norm(b), 1.0, 1e-6);
  EXPECT_NEAR(norm(p.embed_image(random_image(20, 12, 3, 4))), 1.0, 1e-6);
  EXPECT_THROW(p.embed_image(Image(8, 8, 1)), std::invalid_argument);
}

TEST(StubProvider, SeedChangesEmbeddings) {
  StubEmbeddingProvider a(16, 16, 3, 1), b(16, 16, 3, 2);
  EXPECT_NE(a.embed_text("dog"), b.embed_text("dog"));
  EXPECT_NE(a.embed_image(Image(8, 8, 3, 0.3f)), b.embed_image(Image(8, 8, 3, 0.3f)));
}

TEST(BuildConditioning, ThreeLabelsMaskAndShape) {
  Builder b(6, 8, {10, 8});
  auto s = b.builder.build(global(6, 1), {"red square", "blue circle", "red square"});
  EXPECT_EQ(s.tokens.shape(), (Shape{11, 8}));
  std::vector<std::uint8_t> want{1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(s.mask, want);
  // pads are the pad embedding, repeated labels share a token
  EXPECT_EQ(token(s, 1), token(s, 3));
  const auto pad = b.provider.embed_text(kPadToken);
  for (std::size_t i = 4; i < 11; ++i) EXPECT_EQ(token(s, i), pad);
}

TEST(BuildConditioning, SameInputsSameSignal) {
  Builder b(6, 8, {4, 8});
  auto g = global(6, 3);
  auto x = b.builder.build(g, {"a", "b"}), y = b.builder.build(g, {"a", "b"});
  EXPECT_EQ(x.tokens.value().data, y.tokens.value().data);
  EXPECT_EQ(x.mask, y.mask);
}

TEST(BuildConditioning, FullCapacityHasNoPads) {
  Builder b(6, 8, {3, 8});
  auto s = b.builder.build(global(6, 1), {"a", "b", "c"});
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{1, 1, 1, 1}));
}

TEST(BuildConditioning, CapacityAndEmptyErrors) {
  Builder b(6, 8, {2, 8});
  try {
    b.builder.build(global(6, 1), {"a", "b", "c"});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("graph exceeds capacity"), std::string::npos);
  }
  EXPECT_THROW(b.builder.build(global(6, 1), {}), std::invalid_argument);
  EXPECT_THROW(b.builder.build(global(5, 1), {"a"}), ShapeError);
}

TEST(BuildConditioning, DimensionInvariance) {
  Builder b(6, 8, {5, 8});
  for (std::size_t n = 1; n <= 5; ++n) {
    std::vector<std::string> labels(n, "x");
    auto s = b.builder.build(global(6, n), labels);
    EXPECT_EQ(s.tokens.shape(), (Shape{6, 8}));
    EXPECT_EQ(s.mask.size(), 6u);
  }
}

TEST(BuildConditioning, GraphTokenIsLinearInGlobalEmbedding) {
  Builder b(6, 8, {3, 8});
  auto g = random_tensor<double>({1, 6}, 11);
  Tensor<double> g2 = g;
  for (auto& x : g2.data) x *= 2.0;
  auto t1 = token(b.builder.build(ag::constant(g), {"a"}), 0);
  auto t2 = token(b.builder.build(ag::constant(g2), {"a"}), 0);
  for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(t2[d], 2.0 * t1[d], 1e-12);
}

TEST(BuildConditioning, LabelOrderPreservedWithProjection) {
  Builder b(6, 12, {4, 5});  // text 12 -> d_cond 5 needs the learned projection
  ASSERT_TRUE(b.builder.params().contains("label_proj.weight"));
  auto s = b.builder.build(global(6, 2), {"c", "a", "b"});
  auto proj = nn::Linear<double>::bind(b.builder.params(), "label_proj");
  const std::vector<std::string> order{"c", "a", "b"};
  for (std::size_t i = 0; i < 3; ++i) {
    auto e = b.provider.embed_text(order[i]);
    auto y = proj(ag::constant(Tensor<double>({1, 12}, e))).value().data;
    auto got = token(s, i + 1);
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(got[d], y[d], 1e-12);
  }
}

TEST(BuildConditioning, GraphTokenGradientFlows) {
  Builder b(6, 8, {3, 8});
  auto g = ag::Var<double>(random_tensor<double>({1, 6}, 5), true);
  auto s = b.builder.build(g, {"a", "b"});
  ag::backward(ag::sum(ag::square(s.tokens)));
  double n = 0;
  for (double x : g.grad().data) n += x * x;
  EXPECT_GT(n, 0.0);
}

TEST(BuildConditioning, StackAndNullConditioning) {
  Builder b(6, 8, {3, 8});
  auto x = b.builder.build(global(6, 1), {"a"}), y = b.builder.build(global(6, 2), {"a", "b", "c"});
  auto batch = stack_conditioning<double>({x, y});
  EXPECT_EQ(batch.tokens.shape(), (Shape{2, 4, 8}));
  EXPECT_EQ(batch.mask, (std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 1, 1}));
  auto null = null_conditioning<double>(2, 4, 8);
  for (auto m : null.mask) EXPECT_EQ(m, 0);
}

TEST(HttpProvider, MatchesServedStubAfterNormalization) {
  StubServer server(16);
  HttpProviderConfig cfg;
  cfg.base_url = server.url();
  cfg.text_dim = cfg.image_dim = 16;
  HttpEmbeddingProvider p(cfg);
  auto t = p.embed_text("dog");
  auto want = server.stub().embed_text("dog");
  for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(t[d], want[d], 1e-12);
  auto im = random_image(8, 8, 3, 2);
  auto v = p.embed_image(im), w = server.stub().embed_image(im);
  for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(v[d], w[d], 1e-12);
  EXPECT_NE(p.tag().find("external-service"), std::string::npos);
}

TEST(HttpProvider, RetriesTransientFailures) {
  StubServer server(16, 2);
  HttpProviderConfig cfg;
  cfg.base_url = server.url();
  cfg.text_dim = cfg.image_dim = 16;
  cfg.retries = 2;
  HttpEmbeddingProvider p(cfg);
  EXPECT_NEAR(norm(p.embed_text("dog")), 1.0, 1e-12);
  EXPECT_EQ(server.hits(), 3);
}

TEST(HttpProvider, UnreachableReportsRetryCount) {
  int port;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  HttpProviderConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.timeout_seconds = 0.5;
  cfg.retries = 2;
  HttpEmbeddingProvider p(cfg);
  try {
    p.embed_text("dog");
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 3);
    EXPECT_NE(std::string(e.what()).find("after 3 attempts"), std::string::npos);
  }
}

TEST(HttpProvider, ServerErrorExhaustsRetries) {
  StubServer server(16, 100);
  HttpProviderConfig cfg;
  cfg.base_url = server.url();
  cfg.text_dim = 16;
  cfg.retries = 1;
  HttpEmbeddingProvider p(cfg);
  try {
    p.embed_text("dog");
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 2);
    EXPECT_NE(std::string(e.what()).find("HTTP 503"), std::string::npos);
  }
  EXPECT_EQ(server.hits(), 2);
}
