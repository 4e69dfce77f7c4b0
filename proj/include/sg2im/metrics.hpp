#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sg2im/image.hpp"
#include "sg2im/ops.hpp"
#include "sg2im/rng.hpp"
#include "sg2im/scenegraph.hpp"

namespace sg2im::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Image features for FID and class posteriors for IS.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::vector<double> extract(const Image& img) const = 0;
  virtual std::vector<double> classify(const Image& img) const = 0;
};

// Object labels (vocabulary ids, with multiplicity) found in an image.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<std::size_t> detect(const Image& img) const = 0;
};

using DistanceFn = std::function<double(const Image&, const Image&)>;

// ---------------------------------------------------------------- Inception score

inline void check_distribution_rows(const std::vector<std::vector<double>>& probs) {
  if (probs.empty()) throw MetricError("inception score needs at least one row");
  const std::size_t K = probs[0].size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != K || K == 0) throw MetricError("row " + std::to_string(i) + " has wrong width");
    double s = 0;
    for (double p : probs[i]) {
      if (!(p >= 0.0)) throw MetricError("row " + std::to_string(i) + " has a negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) throw MetricError("row " + std::to_string(i) + " does not sum to 1");
  }
}

// exp(mean_i KL(p(y|x_i) || p(y))) over a single split.
inline double inception_score(const std::vector<std::vector<double>>& probs) {
  check_distribution_rows(probs);
  const std::size_t N = probs.size(), K = probs[0].size();
  constexpr double kFloor = 1e-12;
  std::vector<double> marginal(K, 0.0);
  for (const auto& row : probs)
    for (std::size_t k = 0; k < K; ++k) marginal[k] += row[k];
  for (auto& m : marginal) m /= static_cast<double>(N);
  double kl_sum = 0.0;
  for (const auto& row : probs) {
    double kl = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (row[k] > 0) kl += row[k] * (std::log(std::max(row[k], kFloor)) - std::log(std::max(marginal[k], kFloor)));
    kl_sum += kl;
  }
  return std::exp(std::max(0.0, kl_sum / static_cast<double>(N)));
}

struct SplitScore {
  double mean = 0, stddev = 0;
};

// Mean and population std of the score over `splits` contiguous chunks.
inline SplitScore inception_score_splits(const std::vector<std::vector<double>>& probs, std::size_t splits) {
  if (splits == 0 || splits > probs.size()) throw MetricError("invalid inception score split count");
  std::vector<double> scores;
  for (std::size_t s = 0; s < splits; ++s) {
    const std::size_t lo = s * probs.size() / splits, hi = (s + 1) * probs.size() / splits;
    scores.push_back(inception_score({probs.begin() + lo, probs.begin() + hi}));
  }
  SplitScore r;
  for (double v : scores) r.mean += v;
  r.mean /= static_cast<double>(scores.size());
  for (double v : scores) r.stddev += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(r.stddev / static_cast<double>(scores.size()));
  return r;
}

// ---------------------------------------------------------------- FID

namespace detail {
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

// Rows are samples. Fréchet distance between the fitted Gaussians.
inline double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw MetricError("FID needs at least 2 samples per set");
  if (a.cols() != b.cols() || a.cols() == 0) throw MetricError("FID feature widths differ");
  auto stats = [](const Eigen::MatrixXd& x) {
    Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - mu;
    Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    return std::pair{mu, cov};
  };
  auto [mu_a, cov_a] = stats(a);
  auto [mu_b, cov_b] = stats(b);
  // Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}); the inner product is symmetric PSD.
  Eigen::MatrixXd ra = detail::sqrtm_psd(cov_a);
  Eigen::MatrixXd inner = ra * cov_b * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()[i]));
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

inline Eigen::MatrixXd stack_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

// ---------------------------------------------------------------- diversity

inline double mean_abs_pixel_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw MetricError("images differ in shape");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

// Mean distance over all unordered pairs of samples generated from one graph.
inline double diversity_score(const std::vector<Image>& images, const DistanceFn& distance = mean_abs_pixel_distance) {
  if (images.size() < 2) throw MetricError("diversity score needs at least 2 images");
  for (const auto& im : images)
    if (!im.same_shape(images[0])) throw MetricError("diversity score images differ in shape");
  std::vector<double> d;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = i + 1; j < images.size(); ++j) d.push_back(distance(images[i], images[j]));
  const double n = static_cast<double>(d.size());
  return ag::ordered_sum(d) / n;
}

// ---------------------------------------------------------------- object occurrence

// Count-aware overlap between graph labels and detected labels over graph size.
inline double occurrence_ratio(const std::vector<std::size_t>& graph_labels, const std::vector<std::size_t>& detected) {
  if (graph_labels.empty()) throw MetricError("graph has no objects");
  std::map<std::size_t, std::size_t> want, got;
  for (auto l : graph_labels) ++want[l];
  for (auto l : detected) ++got[l];
  std::size_t hit = 0;
  for (const auto& [label, n] : want) {
    auto it = got.find(label);
    if (it != got.end()) hit += std::min(n, it->second);
  }
  return static_cast<double>(hit) / static_cast<double>(graph_labels.size());
}

struct OorResult {
  double mean = 0;
  std::vector<std::optional<double>> per_pair;  // nullopt for excluded pairs
  std::vector<std::size_t> excluded;
};

inline OorResult oor_from_detections(const std::vector<SceneGraph>& graphs,
                                     const std::vector<std::vector<std::size_t>>& detections) {
  if (graphs.size() != detections.size()) throw MetricError("graphs and detections differ in count");
  OorResult r;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    if (graphs[i].object_ids.empty()) {
      r.per_pair.push_back(std::nullopt);
      r.excluded.push_back(i);
      continue;
    }
    const double ratio = occurrence_ratio(graphs[i].object_ids, detections[i]);
    r.per_pair.push_back(ratio);
    sum += ratio;
    ++used;
  }
  if (used == 0) throw MetricError("no pair has any graph objects");
  r.mean = sum / static_cast<double>(used);
  return r;
}

inline OorResult oor(const std::vector<std::pair<SceneGraph, Image>>& pairs, const Detector& detector) {
  std::vector<SceneGraph> graphs;
  std::vector<std::vector<std::size_t>> dets;
  for (const auto& [g, img] : pairs) {
    graphs.push_back(g);
    dets.push_back(g.object_ids.empty() ? std::vector<std::size_t>{} : detector.detect(img));
  }
  return oor_from_detections(graphs, dets);
}

// ---------------------------------------------------------------- stub extractor

// Fixed seeded random projection of an 8x8 bilinear thumbnail, followed by a
// fixed linear softmax classifier.
class RandomProjectionFeatures final : public FeatureExtractor {
 public:
  RandomProjectionFeatures(std::size_t num_classes, std::size_t feature_dim = 64, std::size_t channels = 3,
                           std::uint64_t seed = 1234)
      : classes_(num_classes), dim_(feature_dim), channels_(channels) {
    if (num_classes == 0 || feature_dim == 0) throw MetricError("feature extractor needs positive sizes");
    Rng rng(seed);
    const std::size_t in = 64 * channels;
    proj_.resize(dim_ * in);
    for (auto& w : proj_) w = rng.normal() / std::sqrt(static_cast<double>(in));
    cls_.resize(classes_ * dim_);
    for (auto& w : cls_) w = rng.normal() * 2.0 / std::sqrt(static_cast<double>(dim_));
  }

  std::size_t feature_dim() const override { return dim_; }
  std::size_t num_classes() const override { return classes_; }

  std::vector<double> extract(const Image& img) const override {
    if (img.channels != channels_) throw MetricError("feature extractor channel mismatch");
    Image small = resize_bilinear(img, 8, 8);
    const std::size_t in = small.data.size();
    std::vector<double> f(dim_, 0.0);
    for (std::size_t o = 0; o < dim_; ++o) {
      double s = 0;
      for (std::size_t i = 0; i < in; ++i) s += proj_[o * in + i] * (small.data[i] - 0.5);
      f[o] = std::tanh(s);
    }
    return f;
  }

  std::vector<double> classify(const Image& img) const override {
    auto f = extract(img);
    std::vector<double> logits(classes_, 0.0);
    for (std::size_t k = 0; k < classes_; ++k)
      for (std::size_t d = 0; d < dim_; ++d) logits[k] += cls_[k * dim_ + d] * f[d];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (auto& l : logits) l /= z;
    return logits;
  }

 private:
  std::size_t classes_, dim_, channels_;
  std::vector<double> proj_, cls_;
};

// ---------------------------------------------------------------- report

struct PairMetrics {
  std::string pair_id;
  std::optional<double> oor;
  std::optional<double> ds;
};

struct MetricsReport {
  double is_mean = 1, is_std = 0, fid = 0, ds_mean = 0, oor_mean = 0;
  std::vector<PairMetrics> per_pair;
  nlohmann::json config;

  nlohmann::json to_json() const {
    nlohmann::json j{{"is_mean", is_mean}, {"is_std", is_std}, {"fid", fid}, {"ds_mean", ds_mean},
                     {"oor_mean", oor_mean}, {"config", config}};
    j["per_pair"] = nlohmann::json::array();
    for (const auto& p : per_pair) {
      nlohmann::json r{{"pair_id", p.pair_id}};
      r["oor"] = p.oor ? nlohmann::json(*p.oor) : nlohmann::json(nullptr);
      r["ds"] = p.ds ? nlohmann::json(*p.ds) : nlohmann::json(nullptr);
      j["per_pair"].push_back(r);
    }
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "FID  " << fid << "\nIS   " << is_mean << " +- " << is_std << "\nDS   " << ds_mean << "\nOOR  " << oor_mean
       << "\n\n";
    os << std::left << std::setw(24) << "pair" << std::setw(10) << "oor" << "ds\n";
    for (const auto& p : per_pair) {
      os << std::setw(24) << p.pair_id << std::setw(10) << (p.oor ? std::to_string(*p.oor) : std::string("-"))
         << (p.ds ? std::to_string(*p.ds) : std::string("-")) << '\n';
    }
    return os.str();
  }
};

}  // namespace sg2im::metrics
