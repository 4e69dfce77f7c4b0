#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "sg2im/rng.hpp"

namespace sg2im {

// Input data that cannot be used (bad manifest, unknown label, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense label <-> id mapping for one label kind.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(const std::vector<std::string>& labels) {
    for (const auto& l : labels) add(l);
  }

  std::size_t add(const std::string& label) {
    if (label.empty()) throw DataError("empty label");
    auto [it, inserted] = index_.emplace(label, labels_.size());
    if (!inserted) throw DataError("duplicate label '" + label + "'");
    labels_.push_back(label);
    return it->second;
  }
  std::size_t add_if_missing(const std::string& label) {
    auto it = index_.find(label);
    return it != index_.end() ? it->second : add(label);
  }

  std::optional<std::size_t> find(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t id(const std::string& label) const {
    auto r = find(label);
    if (!r) throw DataError("unknown label '" + label + "'");
    return *r;
  }
  const std::string& label(std::size_t id) const {
    if (id >= labels_.size()) throw DataError("label id " + std::to_string(id) + " out of range");
    return labels_[id];
  }
  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  bool operator==(const LabelSet& o) const { return labels_ == o.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Vocabulary {
  LabelSet objects;
  LabelSet relations;
  bool operator==(const Vocabulary&) const = default;
};

struct Triplet {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;
  auto operator<=>(const Triplet&) const = default;
};

// Objects are node indices into object_ids; several nodes may share a label.
struct SceneGraph {
  std::vector<std::size_t> object_ids;
  std::vector<Triplet> triplets;
  bool operator==(const SceneGraph&) const = default;
};

struct Violation {
  enum class Kind { kNoObjects, kUnknownObjectLabel, kUnknownRelation, kIndexOutOfRange, kSelfRelation, kDuplicateTriplet };
  Kind kind;
  std::size_t index;  // object index or triplet index, depending on kind
  std::string message;
};

inline std::vector<Violation> validate(const SceneGraph& g, const Vocabulary& vocab) {
  using K = Violation::Kind;
  std::vector<Violation> out;
  if (g.object_ids.empty()) out.push_back({K::kNoObjects, 0, "graph has no objects"});
  for (std::size_t i = 0; i < g.object_ids.size(); ++i)
    if (g.object_ids[i] >= vocab.objects.size())
      out.push_back({K::kUnknownObjectLabel, i,
                     "object " + std::to_string(i) + ": unknown label id " + std::to_string(g.object_ids[i])});
  std::set<Triplet> seen;
  for (std::size_t k = 0; k < g.triplets.size(); ++k) {
    const auto& t = g.triplets[k];
    const std::string where = "triplet " + std::to_string(k) + ": ";
    if (t.subject >= g.object_ids.size() || t.object >= g.object_ids.size())
      out.push_back({K::kIndexOutOfRange, k, where + "object index out of range"});
    if (t.relation >= vocab.relations.size())
      out.push_back({K::kUnknownRelation, k, where + "unknown relation id " + std::to_string(t.relation)});
    if (t.subject == t.object) out.push_back({K::kSelfRelation, k, where + "self-relation"});
    if (!seen.insert(t).second) out.push_back({K::kDuplicateTriplet, k, where + "duplicate triplet"});
  }
  return out;
}

inline bool is_valid(const SceneGraph& g, const Vocabulary& vocab) { return validate(g, vocab).empty(); }

inline std::string describe(const SceneGraph& g, const Vocabulary& vocab) {
  std::string s;
  for (std::size_t k = 0; k < g.triplets.size(); ++k) {
    const auto& t = g.triplets[k];
    if (k) s += "; ";
    s += vocab.objects.label(g.object_ids.at(t.subject)) + " " + vocab.relations.label(t.relation) + " " +
         vocab.objects.label(g.object_ids.at(t.object));
  }
  if (g.triplets.empty())
    for (std::size_t i = 0; i < g.object_ids.size(); ++i) s += (i ? ", " : "") + vocab.objects.label(g.object_ids[i]);
  return s;
}

// ---------------------------------------------------------------- spatial graphs

inline const std::array<std::string, 6>& spatial_predicates() {
  static const std::array<std::string, 6> p{"left of", "right of", "above", "below", "inside", "surrounding"};
  return p;
}

struct Box {
  std::size_t object_id = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // normalized, y grows downwards
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
};

struct BoxLayout {
  std::vector<Box> boxes;
};

inline bool strictly_inside(const Box& a, const Box& b) {
  return b.x0 < a.x0 && a.x1 < b.x1 && b.y0 < a.y0 && a.y1 < b.y1;
}

// Predicate name describing a relative to b.
inline const std::string& spatial_predicate(const Box& a, const Box& b) {
  const auto& p = spatial_predicates();
  if (strictly_inside(a, b)) return p[4];
  if (strictly_inside(b, a)) return p[5];
  const double dx = b.cx() - a.cx();
  const double dy = b.cy() - a.cy();
  if (std::abs(dx) > std::abs(dy)) return dx > 0 ? p[0] : p[1];
  if (std::abs(dy) > std::abs(dx)) return dy > 0 ? p[2] : p[3];
  // |dx| == |dy|: fixed priority left of > right of > above > below.
  // dx == 0 here means the centres coincide.
  return dx < 0 ? p[1] : p[0];
}

enum class PairSampling { kChain, kAllPairs };

struct SpatialGraphOptions {
  PairSampling sampling = PairSampling::kChain;
  std::uint64_t seed = 0;  // drives the chain permutation only
};

inline void validate_layout(const BoxLayout& layout) {
  for (std::size_t i = 0; i < layout.boxes.size(); ++i) {
    const auto& b = layout.boxes[i];
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
      throw DataError("box " + std::to_string(i) + " has non-positive extent");
  }
}

inline SceneGraph synth_spatial_graph(const BoxLayout& layout, const LabelSet& relations,
                                      const SpatialGraphOptions& opt = {}) {
  if (layout.boxes.size() < 2) throw DataError("degenerate layout: need at least 2 boxes");
  validate_layout(layout);
  for (const auto& p : spatial_predicates())
    if (!relations.find(p)) throw DataError("relation vocabulary lacks spatial predicate '" + p + "'");

  SceneGraph g;
  for (const auto& b : layout.boxes) g.object_ids.push_back(b.object_id);
  auto emit = [&](std::size_t a, std::size_t b) {
    g.triplets.push_back({a, relations.id(spatial_predicate(layout.boxes[a], layout.boxes[b])), b});
  };
  const std::size_t n = layout.boxes.size();
  if (opt.sampling == PairSampling::kAllPairs) {
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) emit(a, b);
  } else {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(opt.seed);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (std::size_t i = 0; i + 1 < n; ++i) emit(perm[i], perm[i + 1]);
  }
  return g;
}

inline Vocabulary spatial_vocabulary(const std::vector<std::string>& object_labels) {
  Vocabulary v;
  for (const auto& l : object_labels) v.objects.add(l);
  for (const auto& p : spatial_predicates()) v.relations.add(p);
  return v;
}

}  // namespace sg2im
