#include <gtest/gtest.h>

#include <algorithm>

#include "support.hpp"

using namespace sg2im;
using namespace sg2im::metrics;
using namespace testing_support;

namespace {

std::vector<std::vector<double>> random_rows(std::size_t n, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(n, std::vector<double>(k));
  for (auto& r : rows) {
    double s = 0;
    for (auto& v : r) s += (v = rng.uniform(0.01, 1.0));
    for (auto& v : r) v /= s;
  }
  return rows;
}

// exp of the mean row KL to the column mean, by explicit loops.
double naive_is(const std::vector<std::vector<double>>& p) {
  const std::size_t n = p.size(), k = p[0].size();
  std::vector<double> m(k, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) m[j] += p[i][j] / n;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) total += p[i][j] * std::log(p[i][j] / m[j]);
  return std::exp(total / n);
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

SceneGraph graph_of(std::vector<std::size_t> ids) {
  SceneGraph g;
  g.object_ids = std::move(ids);
  return g;
}

class ListDetector final : public Detector {
 public:
  explicit ListDetector(std::vector<std::size_t> ids) : ids_(std::move(ids)) {}
  std::vector<std::size_t> detect(const Image&) const override { return ids_; }

 private:
  std::vector<std::size_t> ids_;
};

}  // namespace

// ---------------------------------------------------------------- inception score

TEST(InceptionScore, UniformRowsScoreOne) {
  std::vector<std::vector<double>> rows(7, std::vector<double>(5, 0.2));
  EXPECT_NEAR(inception_score(rows), 1.0, 1e-9);
}

TEST(InceptionScore, BalancedOneHotsScoreK) {
  for (std::size_t k : {2, 5, 9}) {
    std::vector<std::vector<double>> rows(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < k; ++i) rows[i][i] = 1.0;
    EXPECT_NEAR(inception_score(rows), static_cast<double>(k), 1e-9);
  }
}

TEST(InceptionScore, MatchesLoopOracleAndStaysInRange) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto rows = random_rows(10, 4, seed);
    const double is = inception_score(rows);
    EXPECT_NEAR(is, naive_is(rows), 1e-10);
    EXPECT_GE(is, 1.0);
    EXPECT_LE(is, 4.0);
  }
}

TEST(InceptionScore, SplitsAverageContiguousChunks) {
  auto rows = random_rows(12, 3, 9);
  auto s = inception_score_splits(rows, 3);
  std::vector<double> parts;
  for (std::size_t i = 0; i < 3; ++i) parts.push_back(inception_score({rows.begin() + 4 * i, rows.begin() + 4 * i + 4}));
  const double mean = (parts[0] + parts[1] + parts[2]) / 3;
  double var = 0;
  for (double p : parts) var += (p - mean) * (p - mean) / 3;
  EXPECT_NEAR(s.mean, mean, 1e-12);
  EXPECT_NEAR(s.stddev, std::sqrt(var), 1e-12);
  auto one = inception_score_splits(rows, 1);
  EXPECT_NEAR(one.mean, inception_score(rows), 1e-15);
  EXPECT_EQ(one.stddev, 0.0);
  EXPECT_THROW(inception_score_splits(rows, 0), MetricError);
  EXPECT_THROW(inception_score_splits(rows, 13), MetricError);
}

TEST(InceptionScore, RejectsInvalidRows) {
  EXPECT_THROW(inception_score({}), MetricError);
  EXPECT_THROW(inception_score({{0.5, 0.4}}), MetricError);
  EXPECT_THROW(inception_score({{1.2, -0.2}}), MetricError);
  EXPECT_THROW(inception_score({{0.5, 0.5}, {1.0}}), MetricError);
}

// ---------------------------------------------------------------- FID

TEST(Fid, IdenticalSetsScoreZero) {
  auto a = random_matrix(40, 6, 1);
  EXPECT_LE(fid(a, a), 1e-8);
}

TEST(Fid, MeanShiftGivesSquaredNorm) {
  auto a = random_matrix(50, 5, 2);
  Eigen::RowVectorXd v(5);
  v << 0.3, -1.2, 2.0, 0.0, 0.7;
  Eigen::MatrixXd b = a.rowwise() + v;
  EXPECT_NEAR(fid(a, b), v.squaredNorm(), 1e-6);
}

TEST(Fid, OneDimensionalClosedForm) {
  auto a = random_matrix(30, 1, 3);
  Eigen::MatrixXd b = (random_matrix(25, 1, 4).array() * 2.5 + 1.0).matrix();
  auto moments = [](const Eigen::MatrixXd& x) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().sum() / static_cast<double>(x.rows() - 1);
    return std::pair{mu, std::sqrt(var)};
  };
  auto [m1, s1] = moments(a);
  auto [m2, s2] = moments(b);
  EXPECT_NEAR(fid(a, b), (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2), 1e-9);
}

TEST(Fid, SymmetricAndOrderInvariant) {
  auto a = random_matrix(20, 4, 5), b = random_matrix(30, 4, 6);
  EXPECT_NEAR(fid(a, b), fid(b, a), 1e-8);
  Eigen::MatrixXd reversed = a.colwise().reverse();
  EXPECT_NEAR(fid(a, b), fid(reversed, b), 1e-8);
  EXPECT_GE(fid(a, b), 0.0);
}

TEST(Fid, RejectsTooFewSamplesOrWidthMismatch) {
  EXPECT_THROW(fid(random_matrix(1, 3, 1), random_matrix(5, 3, 2)), MetricError);
  EXPECT_THROW(fid(random_matrix(5, 3, 1), random_matrix(5, 2, 2)), MetricError);
}

// ---------------------------------------------------------------- diversity

TEST(Diversity, IdenticalImagesScoreZero) {
  auto im = random_image(4, 4, 3, 1);
  EXPECT_EQ(diversity_score({im, im, im}), 0.0);
}

TEST(Diversity, TwoImagesGiveTheirDistance) {
  Image a(2, 2, 1, 0.2f), b(2, 2, 1, 0.7f);
  EXPECT_NEAR(diversity_score({a, b}), 0.5, 1e-7);
}

TEST(Diversity, MatchesPairEnumerationAndIgnoresOrder) {
  std::vector<Image> ims;
  for (std::uint64_t s = 0; s < 4; ++s) ims.push_back(random_image(5, 5, 3, s + 10));
  double oracle = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i < j) {
        double d = 0;
        for (std::size_t k = 0; k < ims[i].data.size(); ++k) d += std::abs(double(ims[i].data[k]) - ims[j].data[k]);
        oracle += d / ims[i].data.size();
        ++pairs;
      }
  ASSERT_EQ(pairs, 6);
  EXPECT_NEAR(diversity_score(ims), oracle / 6, 1e-12);
  std::vector<Image> shuffled{ims[2], ims[0], ims[3], ims[1]};
  EXPECT_EQ(diversity_score(shuffled), diversity_score(ims));
}

TEST(Diversity, UsesTheGivenDistance) {
  std::vector<Image> ims(3, Image(1, 1, 1));
  EXPECT_NEAR(diversity_score(ims, [](const Image&, const Image&) { return 2.5; }), 2.5, 1e-15);
}

TEST(Diversity, RejectsTooFewOrMismatchedImages) {
  EXPECT_THROW(diversity_score({Image(2, 2, 3)}), MetricError);
  EXPECT_THROW(diversity_score({Image(2, 2, 3), Image(2, 3, 3)}), MetricError);
}

// ---------------------------------------------------------------- object occurrence

TEST(Oor, HandCases) {
  // dog = 0, car = 1, tree = 2, person = 3, cat = 4
  EXPECT_DOUBLE_EQ(occurrence_ratio({0, 1, 2}, {0, 2, 3}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(occurrence_ratio({4, 4}, {4}), 0.5);
  auto r = oor_from_detections({graph_of({0, 1}), graph_of({2, 3})}, {{0, 1}, {2}});
  EXPECT_DOUBLE_EQ(r.mean, 0.75);
  ASSERT_EQ(r.per_pair.size(), 2u);
  EXPECT_DOUBLE_EQ(*r.per_pair[0], 1.0);
  EXPECT_DOUBLE_EQ(*r.per_pair[1], 0.5);
}

TEST(Oor, EmptyGraphsAreExcludedAndFlagged) {
  auto r = oor_from_detections({graph_of({}), graph_of({1}), graph_of({2})}, {{}, {1}, {}});
  EXPECT_EQ(r.excluded, std::vector<std::size_t>{0});
  EXPECT_FALSE(r.per_pair[0].has_value());
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
  EXPECT_THROW(oor_from_detections({graph_of({})}, {{}}), MetricError);
  EXPECT_THROW(oor_from_detections({graph_of({1})}, {}), MetricError);
}

TEST(Oor, MonotoneInDetectionsAndGraphObjects) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> g, d;
    for (int i = 0; i < 1 + rng.integer(0, 4); ++i) g.push_back(rng.integer(0, 3));
    for (int i = 0; i < rng.integer(0, 4); ++i) d.push_back(rng.integer(0, 3));
    const double base = occurrence_ratio(g, d);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
    auto more_d = d;
    more_d.push_back(rng.integer(0, 3));
    EXPECT_GE(occurrence_ratio(g, more_d), base);
    // A graph object whose label has no unmatched detection left can only dilute the ratio.
    const std::size_t extra = rng.integer(0, 3);
    if (std::count(g.begin(), g.end(), extra) >= std::count(d.begin(), d.end(), extra)) {
      auto more_g = g;
      more_g.push_back(extra);
      EXPECT_LE(occurrence_ratio(more_g, d), base);
    }
  }
}

TEST(Oor, RunsTheDetectorOnEachImage) {
  ListDetector det({1, 2});
  std::vector<std::pair<SceneGraph, Image>> pairs{{graph_of({1, 2}), Image(2, 2, 3)}, {graph_of({1, 3}), Image(2, 2, 3)}};
  auto r = oor(pairs, det);
  EXPECT_DOUBLE_EQ(r.mean, 0.75);
}

TEST(Oor, ToyDetectorFindsRenderedObjects) {
  toy::CorpusConfig cfg;
  cfg.count = 8;
  cfg.image_size = 32;
  auto ds = toy::generate_toy_dataset(cfg, 5);
  toy::ShapeColorDetector det(ds.vocab);
  std::vector<std::pair<SceneGraph, Image>> pairs;
  for (const auto& p : ds.pairs) pairs.push_back({p.graph, p.image});
  EXPECT_DOUBLE_EQ(oor(pairs, det).mean, 1.0);
  Image blank(32, 32, 3, 1.f);
  std::vector<std::pair<SceneGraph, Image>> empty{{ds.pairs[0].graph, blank}};
  EXPECT_DOUBLE_EQ(oor(empty, det).mean, 0.0);
}

// ---------------------------------------------------------------- stub extractor and report

TEST(RandomProjectionFeatures, DeterministicDistributions) {
  RandomProjectionFeatures a(6, 16), b(6, 16), c(6, 16, 3, 99);
  auto im = random_image(12, 12, 3, 4);
  EXPECT_EQ(a.extract(im), b.extract(im));
  EXPECT_NE(a.extract(im), c.extract(im));
  EXPECT_EQ(a.extract(im).size(), 16u);
  auto p = a.classify(im);
  ASSERT_EQ(p.size(), 6u);
  double s = 0;
  for (double v : p) {
    EXPECT_GE(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_THROW(a.extract(random_image(4, 4, 1, 1)), MetricError);
  EXPECT_THROW(RandomProjectionFeatures(0), MetricError);
}

TEST(MetricsReport, SerializesJsonAndText) {
  MetricsReport r;
  r.is_mean = 1.5;
  r.fid = 2.25;
  r.ds_mean = 0.1;
  r.oor_mean = 0.75;
  r.config = {{"seed", 7}};
  r.per_pair = {{"p0", 0.5, 0.2}, {"p1", std::nullopt, std::nullopt}};
  auto j = r.to_json();
  EXPECT_EQ(j["fid"], 2.25);
  EXPECT_EQ(j["config"]["seed"], 7);
  EXPECT_EQ(j["per_pair"][0]["oor"], 0.5);
  EXPECT_TRUE(j["per_pair"][1]["ds"].is_null());
  auto text = r.to_text();
  EXPECT_NE(text.find("FID  2.2500"), std::string::npos);
  EXPECT_NE(text.find("OOR  0.7500"), std::string::npos);
  EXPECT_NE(text.find("p1"), std::string::npos);
}
