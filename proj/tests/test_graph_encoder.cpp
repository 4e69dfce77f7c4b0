#include <gtest/gtest.h>

#include "support.hpp"

using namespace sg2im;
using namespace testing_support;

namespace {

using Enc = GraphEncoder<double>;

// Square weights become the identity, the 3d->d triplet trunk selects the
// relation slice, the 2d_g->d_g projection selects the first half, biases are zero.
nn::ParamSet<double> identity_params(const GraphEncoderConfig& c) {
  auto ps = init_graph_encoder<double>(c, 1);
  for (auto& [name, v] : ps.items()) {
    auto var = v;
    auto& t = var.mutable_value();
    if (name.ends_with(".bias")) {
      std::fill(t.data.begin(), t.data.end(), 0.0);
      continue;
    }
    if (!name.ends_with(".weight")) continue;
    std::fill(t.data.begin(), t.data.end(), 0.0);
    const std::size_t in = t.dim(0), out = t.dim(1);
    const std::size_t offset = in == 3 * out ? out : 0;
    for (std::size_t i = 0; i < out; ++i) t.at(offset + i, i) = 1.0;
  }
  return ps;
}

GraphEncoderConfig config_for(const Vocabulary& v, std::size_t d) { return small_encoder_config(v, d); }

Tensor<double> row(const ag::Var<double>& x, std::size_t r) {
  const std::size_t D = x.dim(1);
  return Tensor<double>({D}, std::vector<double>(x.value().ptr() + r * D, x.value().ptr() + (r + 1) * D));
}

// y = relu?(x W + b) computed by hand.
std::vector<double> affine(const ag::Var<double>& W, const ag::Var<double>& b, const std::vector<double>& x,
                           bool relu) {
  const auto& w = W.value();
  std::vector<double> y(w.dim(1), 0.0);
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = b.defined() ? b.value()[o] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, o);
    y[o] = relu ? std::max(0.0, s) : s;
  }
  return y;
}

std::vector<double> mlp(const nn::Mlp2<double>& m, const std::vector<double>& x) {
  auto h = affine(m.first.weight, m.first.bias, x, true);
  return affine(m.second.weight, m.second.bias, h, m.final_relu);
}

std::vector<double> row_vec(const ag::Var<double>& x, std::size_t r) { return row(x, r).data; }

NodeEdgeState<double> nonneg_state(std::size_t n_obj, std::size_t n_rel, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> o({n_obj, d}), r({n_rel, d});
  for (auto& x : o.data) x = rng.uniform();
  for (auto& x : r.data) x = rng.uniform();
  return {ag::constant(o), ag::constant(r)};
}

}  // namespace

TEST(EmbedLabels, RepeatedLabelSharesRow) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 3);
  SceneGraph g{{3, 3}, {}};
  auto s = enc.embed_labels(g);
  const auto table = enc.params().get("obj_embedding");
  EXPECT_EQ(row(s.objects, 0).data, row(table, 3).data);
  EXPECT_EQ(row(s.objects, 1).data, row(table, 3).data);
  EXPECT_EQ(s.relations.dim(0), 0u);
}

TEST(EmbedLabels, TableRowOfOnes) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 3);
  auto table = enc.params().get("obj_embedding");
  for (std::size_t d = 0; d < 6; ++d) table.mutable_value().at(0, d) = 1.0;
  auto s = enc.embed_labels(SceneGraph{{0, 1}, {{0, 0, 1}}});
  EXPECT_EQ(row(s.objects, 0).data, std::vector<double>(6, 1.0));
  EXPECT_EQ(s.relations.dim(0), 1u);
}

TEST(EmbedLabels, OutOfRangeIdThrows) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 3);
  EXPECT_ANY_THROW(enc.embed_labels(SceneGraph{{17}, {}}));
}

TEST(GraphConv, IdentityConfigurationForwardsRelation) {
  auto v = small_vocab();
  auto c = config_for(v, 4);
  Enc enc(c, identity_params(c));
  SceneGraph g{{0, 1}, {{0, 2, 1}}};
  auto s = nonneg_state(2, 1, 4, 9);
  auto out = Enc::apply_layer(enc.layers()[0], s, g);
  EXPECT_EQ(row(out.relations, 0).data, row(s.relations, 0).data);
  // both nodes see the relation slice through the identity heads
  EXPECT_EQ(row(out.objects, 0).data, row(s.relations, 0).data);
  EXPECT_EQ(row(out.objects, 1).data, row(s.relations, 0).data);
}

TEST(GraphConv, IsolatedNodeKeepsObjectNetOfItself) {
  auto v = small_vocab();
  auto c = config_for(v, 4);
  Enc enc(c, identity_params(c));
  SceneGraph g{{0, 1, 2}, {{0, 2, 1}}};
  auto s = nonneg_state(3, 1, 4, 10);
  auto out = Enc::apply_layer(enc.layers()[0], s, g);
  EXPECT_EQ(row(out.objects, 2).data, row(s.objects, 2).data);
}

TEST(GraphConv, NodeInTwoTripletsAveragesCandidates) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 21);
  auto g = three_node_graph(v);  // node 1 is the object of both triplets
  auto s = nonneg_state(3, 2, 6, 4);
  const auto& L = enc.layers()[0];
  auto out = Enc::apply_layer(L, s, g);

  auto candidate = [&](std::size_t k, bool as_subject) {
    const auto& t = g.triplets[k];
    std::vector<double> x = row_vec(s.objects, t.subject);
    auto r = row_vec(s.relations, k), o = row_vec(s.objects, t.object);
    x.insert(x.end(), r.begin(), r.end());
    x.insert(x.end(), o.begin(), o.end());
    auto h = affine(L.trunk.weight, L.trunk.bias, x, true);
    const auto& head = as_subject ? L.subject : L.object;
    return mlp(L.object_net, affine(head.weight, head.bias, h, true));
  };
  auto c0 = candidate(0, false), c1 = candidate(1, false);
  auto got = row_vec(out.objects, 1);
  for (std::size_t d = 0; d < 6; ++d) EXPECT_NEAR(got[d], 0.5 * (c0[d] + c1[d]), 1e-12);
  // node 0 appears once, as a subject
  auto s0 = candidate(0, true);
  auto got0 = row_vec(out.objects, 0);
  for (std::size_t d = 0; d < 6; ++d) EXPECT_NEAR(got0[d], s0[d], 1e-12);
}

TEST(TripletEmbedding, IdentityMapsSumToTwoTwo) {
  auto v = small_vocab();
  auto c = config_for(v, 2);
  Enc enc(c, identity_params(c));
  SceneGraph g{{0, 1}, {{0, 0, 1}}};
  NodeEdgeState<double> s{ag::constant(Tensor<double>({2, 2}, {1, 0, 1, 1})),
                          ag::constant(Tensor<double>({1, 2}, {0, 1}))};
  EXPECT_EQ(enc.triplet_embedding(s, g, 0).value().data, (std::vector<double>{2, 2}));
}

TEST(TripletEmbedding, ZeroStateZeroBiasGivesZero) {
  auto v = small_vocab();
  auto c = config_for(v, 3);
  auto ps = init_graph_encoder<double>(c, 5);
  Enc enc(c, ps);
  NodeEdgeState<double> s{ag::constant(Tensor<double>({2, 3})), ag::constant(Tensor<double>({1, 3}))};
  auto y = enc.triplet_embedding(s, SceneGraph{{0, 1}, {{0, 0, 1}}}, 0);
  for (double x : y.value().data) EXPECT_EQ(x, 0.0);
}

TEST(TripletEmbedding, MatchesTermByTermRecomputation) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 5), 8);
  auto g = three_node_graph(v);
  auto s = enc.run_layers(g);
  auto map_obj = nn::Mlp2<double>::bind(enc.params(), "map_obj", false);
  auto map_rel = nn::Mlp2<double>::bind(enc.params(), "map_rel", false);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& t = g.triplets[k];
    auto a = mlp(map_obj, row_vec(s.objects, t.subject)), b = mlp(map_rel, row_vec(s.relations, k)),
         o = mlp(map_obj, row_vec(s.objects, t.object));
    auto got = enc.triplet_embedding(s, g, k).value().data;
    for (std::size_t d = 0; d < got.size(); ++d) EXPECT_NEAR(got[d], a[d] + b[d] + o[d], 1e-12);
  }
  EXPECT_THROW(enc.triplet_embedding(s, g, 2), std::out_of_range);
}

TEST(Encode, DefaultWidthIs512AndUnitNorm) {
  auto v = small_vocab();
  GraphEncoderConfig c;
  c.num_objects = v.objects.size();
  c.num_relations = v.relations.size();
  auto enc = GraphEncoder<float>::create(c, 1);
  ag::NoGradGuard guard;
  auto y = enc.encode(three_node_graph(v));
  EXPECT_EQ(y.shape(), (Shape{1, 512}));
  double n = 0;
  for (float x : y.value().data) n += double(x) * x;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
}

TEST(Encode, WidthIndependentOfGraphSize) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 2);
  SceneGraph big{{0, 1, 2, 3, 0}, {{0, 0, 1}, {1, 2, 2}, {3, 1, 4}, {4, 3, 0}}};
  EXPECT_EQ(enc.encode(big).shape(), enc.encode(three_node_graph(v)).shape());
}

TEST(Encode, TripletPermutationInvariant) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 2);
  SceneGraph g{{0, 1, 2, 3}, {{0, 0, 1}, {1, 2, 2}, {3, 1, 2}, {0, 4, 3}}};
  auto ref = enc.encode(g).value().data;
  std::vector<std::size_t> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    SceneGraph h = g;
    for (std::size_t k = 0; k < 4; ++k) h.triplets[k] = g.triplets[perm[k]];
    EXPECT_EQ(enc.encode(h).value().data, ref);
  }
}

TEST(Encode, NodeRelabelInvariant) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 2);
  SceneGraph g{{0, 1, 2, 3}, {{0, 0, 1}, {1, 2, 2}, {3, 1, 2}}};
  auto ref = enc.encode(g).value().data;
  const std::vector<std::size_t> to{2, 0, 3, 1};  // old node -> new node
  SceneGraph h;
  h.object_ids.resize(4);
  for (std::size_t i = 0; i < 4; ++i) h.object_ids[to[i]] = g.object_ids[i];
  for (const auto& t : g.triplets) h.triplets.push_back({to[t.subject], t.relation, to[t.object]});
  EXPECT_EQ(enc.encode(h).value().data, ref);
}

TEST(Encode, DeterministicAcrossCallsAndSeeds) {
  auto v = small_vocab();
  auto a = Enc::create(config_for(v, 6), 2), b = Enc::create(config_for(v, 6), 2);
  auto g = three_node_graph(v);
  EXPECT_EQ(a.encode(g).value().data, a.encode(g).value().data);
  EXPECT_EQ(a.encode(g).value().data, b.encode(g).value().data);
  EXPECT_TRUE(a.params().bitwise_equal(b.params()));
}

TEST(Encode, NoTripletsIsAnError) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 2);
  try {
    enc.encode(SceneGraph{{0, 1}, {}});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_STREQ(e.what(), "graph has no relationships");
  }
}

TEST(Encode, BatchStacksRows) {
  auto v = small_vocab();
  auto enc = Enc::create(config_for(v, 6), 2);
  auto g1 = three_node_graph(v);
  SceneGraph g2{{1, 3}, {{1, 1, 0}}};
  auto b = enc.encode_batch({&g1, &g2});
  EXPECT_EQ(b.shape(), (Shape{2, 6}));
  EXPECT_EQ(row(b, 1).data, row(enc.encode(g2), 0).data);
}

TEST(Encode, MismatchedInputWidthsUseProjections) {
  auto v = small_vocab();
  auto c = config_for(v, 6);
  c.d_o = 3;
  c.d_r = 5;
  auto enc = Enc::create(c, 2);
  EXPECT_TRUE(enc.params().contains("obj_in.weight"));
  EXPECT_TRUE(enc.params().contains("rel_in.weight"));
  EXPECT_EQ(enc.encode(three_node_graph(v)).shape(), (Shape{1, 6}));
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  auto v = small_vocab();
  auto c = config_for(v, 5);
  auto ps = init_graph_encoder<double>(c, 13);
  jitter_biases(ps, 1);
  Enc enc(c, ps);
  auto g = three_node_graph(v);
  const auto w = random_tensor<double>({1, 5}, 77);
  auto loss = [&] { return ag::sum(ag::mul(enc.encode(g), ag::constant(w))); };
  auto r = gradcheck(named(enc.params()), loss, 1e-6, 24);
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 100u);
}

TEST(Encode, UnnormalizedGradientMatchesFiniteDifferences) {
  auto v = small_vocab();
  auto c = config_for(v, 5);
  c.normalize_output = false;
  auto ps = init_graph_encoder<double>(c, 14);
  jitter_biases(ps, 2);
  Enc enc(c, ps);
  auto g = three_node_graph(v);
  auto loss = [&] { return ag::sum(ag::square(enc.encode(g))); };
  auto r = gradcheck(named(enc.params()), loss, 1e-6, 24);
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}
