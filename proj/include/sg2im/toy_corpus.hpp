#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sg2im/dataset.hpp"
#include "sg2im/metrics.hpp"
#include "sg2im/rng.hpp"
#include "sg2im/scenegraph.hpp"

// Synthetic corpus of coloured geometric shapes on a black background.
// Object labels are "<colour> <shape>", e.g. "red square".
namespace sg2im::toy {

using Rgb = std::array<float, 3>;

inline const std::map<std::string, Rgb>& palette() {
  static const std::map<std::string, Rgb> p{
      {"red", {1, 0, 0}},    {"green", {0, 1, 0}},   {"blue", {0, 0, 1}},  {"yellow", {1, 1, 0}},
      {"magenta", {1, 0, 1}}, {"cyan", {0, 1, 1}},   {"white", {1, 1, 1}}, {"orange", {1, 0.5f, 0}},
  };
  return p;
}

enum class ShapeKind { kSquare, kCircle, kTriangle };

inline ShapeKind parse_shape(const std::string& s) {
  if (s == "square") return ShapeKind::kSquare;
  if (s == "circle") return ShapeKind::kCircle;
  if (s == "triangle") return ShapeKind::kTriangle;
  throw DataError("unknown toy shape '" + s + "'");
}

struct CorpusConfig {
  std::size_t count = 64;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "magenta", "cyan"};
  std::vector<std::string> shapes{"square", "circle", "triangle"};
  std::size_t min_objects = 2;
  std::size_t max_objects = 3;
  // Predicates sampled for generated graphs; containment predicates are supported.
  std::vector<std::string> relations{"left of", "right of", "above", "below"};
  double min_extent = 0.22;  // box side as a fraction of the image side
  double max_extent = 0.34;
  std::size_t max_retries = 2000;
  std::string id_prefix = "toy";
};

inline std::string object_label(const std::string& color, const std::string& shape) { return color + " " + shape; }

inline Vocabulary corpus_vocabulary(const CorpusConfig& cfg) {
  std::vector<std::string> labels;
  for (const auto& c : cfg.colors)
    for (const auto& s : cfg.shapes) labels.push_back(object_label(c, s));
  return spatial_vocabulary(labels);
}

inline void check_config(const CorpusConfig& cfg) {
  if (cfg.count == 0) throw DataError("toy corpus count must be positive");
  if (cfg.image_size < 8) throw DataError("toy image size must be at least 8");
  if (cfg.channels != 3) throw DataError("toy corpus renders RGB images only");
  if (cfg.colors.empty() || cfg.shapes.empty()) throw DataError("toy corpus needs colours and shapes");
  for (const auto& c : cfg.colors)
    if (!palette().count(c)) throw DataError("unknown toy colour '" + c + "'");
  for (const auto& s : cfg.shapes) parse_shape(s);
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects) throw DataError("bad toy object count range");
  if (!(cfg.min_extent > 0 && cfg.min_extent <= cfg.max_extent && cfg.max_extent < 1))
    throw DataError("bad toy extent range");
  const auto& sp = spatial_predicates();
  for (const auto& r : cfg.relations) {
    if (std::find(sp.begin(), sp.end(), r) == sp.end()) throw DataError("unsupported toy relation '" + r + "'");
    if ((r == "inside" || r == "surrounding") &&
        (std::find(cfg.shapes.begin(), cfg.shapes.end(), "square") == cfg.shapes.end() || cfg.colors.size() < 2))
      throw DataError("containment relations need the square shape and at least two colours");
  }
  if (cfg.relations.empty() && cfg.min_objects > 1) throw DataError("toy corpus needs at least one relation");
  const bool only_containment = std::all_of(cfg.relations.begin(), cfg.relations.end(),
                                            [](const std::string& r) { return r == "inside" || r == "surrounding"; });
  if (only_containment && cfg.max_objects > 2)
    throw DataError("graphs with more than 2 objects need a directional relation");
}

// Integer pixel box [x0, x1) x [y0, y1).
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int w() const { return x1 - x0; }
  int h() const { return y1 - y0; }
  long area() const { return static_cast<long>(w()) * h(); }
};

inline bool pixel_inside(const PixelBox& a, const PixelBox& b, int margin) {
  return a.x0 >= b.x0 + margin && a.x1 <= b.x1 - margin && a.y0 >= b.y0 + margin && a.y1 <= b.y1 - margin;
}

// At least one empty pixel between the boxes.
inline bool pixel_separated(const PixelBox& a, const PixelBox& b) {
  return a.x1 < b.x0 || b.x1 < a.x0 || a.y1 < b.y0 || b.y1 < a.y0;
}

inline Box to_normalized(const PixelBox& p, std::size_t object_id, std::size_t size) {
  const double s = static_cast<double>(size);
  return {object_id, p.x0 / s, p.y0 / s, p.x1 / s, p.y1 / s};
}

inline bool shape_covers(ShapeKind kind, const PixelBox& b, int x, int y) {
  const double px = x + 0.5 - b.x0, py = y + 0.5 - b.y0;
  const double w = b.w(), h = b.h();
  switch (kind) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kCircle: {
      const double dx = (px - w / 2) / (w / 2), dy = (py - h / 2) / (h / 2);
      return dx * dx + dy * dy <= 1.0;
    }
    case ShapeKind::kTriangle: {
      // apex at top centre, base along the bottom edge
      const double half = (py / h) * (w / 2) + 0.5;
      return std::abs(px - w / 2) <= half;
    }
  }
  return false;
}

struct Placed {
  std::size_t object_id;
  PixelBox box;
};

inline Image render(const std::vector<Placed>& objects, const Vocabulary& vocab, std::size_t size) {
  Image img(size, size, 3, 0.f);
  // containers first so nested shapes stay visible
  std::vector<const Placed*> order;
  for (const auto& o : objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(), [](const Placed* a, const Placed* b) { return a->box.area() > b->box.area(); });
  for (const Placed* o : order) {
    const std::string& label = vocab.objects.label(o->object_id);
    const auto sp = label.find(' ');
    const Rgb& rgb = palette().at(label.substr(0, sp));
    const ShapeKind kind = parse_shape(label.substr(sp + 1));
    for (int y = std::max(0, o->box.y0); y < std::min<int>(size, o->box.y1); ++y)
      for (int x = std::max(0, o->box.x0); x < std::min<int>(size, o->box.x1); ++x)
        if (shape_covers(kind, o->box, x, y))
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
  }
  return img;
}

namespace detail {
inline std::string color_of(const Vocabulary& v, std::size_t id) {
  const auto& l = v.objects.label(id);
  return l.substr(0, l.find(' '));
}
inline std::string shape_of(const Vocabulary& v, std::size_t id) {
  const auto& l = v.objects.label(id);
  return l.substr(l.find(' ') + 1);
}

// Every pair of boxes is either separated or nested with a visible ring,
// where the container is a square of a different colour.
inline bool layout_renderable(const std::vector<Placed>& objs, const Vocabulary& v) {
  for (std::size_t i = 0; i < objs.size(); ++i)
    for (std::size_t j = 0; j < objs.size(); ++j) {
      if (i == j) continue;
      const auto& a = objs[i];
      const auto& b = objs[j];
      if (i < j && pixel_separated(a.box, b.box)) continue;
      if (pixel_inside(a.box, b.box, 2)) {
        if (shape_of(v, b.object_id) != "square" || color_of(v, a.object_id) == color_of(v, b.object_id)) return false;
        continue;
      }
      if (i < j && !pixel_inside(b.box, a.box, 2)) return false;
    }
  return true;
}
}  // namespace detail

// ---------------------------------------------------------------- detector

struct DetectorConfig {
  double max_color_distance = 0.6;  // RGB Euclidean distance to the palette entry
  std::size_t min_area = 8;          // pixels
  double square_min_fill = 0.88;
  double circle_min_fill = 0.66;
};

// Knows the rendering grammar: segments pixels by nearest palette colour,
// labels 4-connected components, and classifies each component's shape by how
// much of its (hole-filled) bounding box it covers.
class ShapeColorDetector final : public metrics::Detector {
 public:
  explicit ShapeColorDetector(Vocabulary vocab, DetectorConfig cfg = {}) : vocab_(std::move(vocab)), cfg_(cfg) {
    for (const auto& label : vocab_.objects.labels()) {
      const auto sp = label.find(' ');
      if (sp == std::string::npos) continue;
      const auto color = label.substr(0, sp);
      if (palette().count(color) && std::find(colors_.begin(), colors_.end(), color) == colors_.end())
        colors_.push_back(color);
    }
  }

  std::vector<std::size_t> detect(const Image& img) const override {
    if (img.channels != 3) throw metrics::MetricError("shape detector needs RGB images");
    const int H = static_cast<int>(img.height), W = static_cast<int>(img.width);
    std::vector<int> cls(static_cast<std::size_t>(H * W), -1);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double best = 0;
        for (std::size_t c = 0; c < 3; ++c) best += sq(img.at(y, x, c));  // distance to background
        int arg = -1;
        for (std::size_t k = 0; k < colors_.size(); ++k) {
          const Rgb& p = palette().at(colors_[k]);
          double d = 0;
          for (std::size_t c = 0; c < 3; ++c) d += sq(img.at(y, x, c) - p[c]);
          if (d < best) best = d, arg = static_cast<int>(k);
        }
        if (arg >= 0 && std::sqrt(best) <= cfg_.max_color_distance) cls[y * W + x] = arg;
      }

    std::vector<std::size_t> found;
    std::vector<char> seen(cls.size(), 0);
    std::vector<int> stack, comp;
    for (int start = 0; start < H * W; ++start) {
      if (cls[start] < 0 || seen[start]) continue;
      const int k = cls[start];
      comp.clear();
      stack.assign(1, start);
      seen[start] = 1;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        comp.push_back(p);
        const int y = p / W, x = p % W;
        const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& q : nb) {
          if (q[0] < 0 || q[1] < 0 || q[0] >= H || q[1] >= W) continue;
          const int idx = q[0] * W + q[1];
          if (!seen[idx] && cls[idx] == k) seen[idx] = 1, stack.push_back(idx);
        }
      }
      if (comp.size() < cfg_.min_area) continue;
      const double fill = filled_fraction(comp, W);
      const std::string shape = fill >= cfg_.square_min_fill   ? "square"
                                : fill >= cfg_.circle_min_fill ? "circle"
                                                               : "triangle";
      if (auto id = vocab_.objects.find(object_label(colors_[k], shape))) found.push_back(*id);
    }
    return found;
  }

 private:
  static double sq(double v) { return v * v; }

  // Fraction of the component's bounding box covered once interior holes are filled.
  static double filled_fraction(const std::vector<int>& comp, int W) {
    int x0 = W, y0 = 1 << 30, x1 = -1, y1 = -1;
    for (int p : comp) {
      x0 = std::min(x0, p % W), x1 = std::max(x1, p % W);
      y0 = std::min(y0, p / W), y1 = std::max(y1, p / W);
    }
    const int bw = x1 - x0 + 3, bh = y1 - y0 + 3;  // one-pixel frame around the box
    std::vector<char> mask(static_cast<std::size_t>(bw * bh), 0), outside(mask.size(), 0);
    for (int p : comp) mask[(p / W - y0 + 1) * bw + (p % W - x0 + 1)] = 1;
    std::vector<int> stack{0};
    outside[0] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / bw, x = p % bw;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[0] >= bh || q[1] >= bw) continue;
        const int idx = q[0] * bw + q[1];
        if (!outside[idx] && !mask[idx]) outside[idx] = 1, stack.push_back(idx);
      }
    }
    long filled = 0;
    for (int y = 1; y < bh - 1; ++y)
      for (int x = 1; x < bw - 1; ++x) filled += !outside[y * bw + x];
    return static_cast<double>(filled) / static_cast<double>((bw - 2) * (bh - 2));
  }

  Vocabulary vocab_;
  DetectorConfig cfg_;
  std::vector<std::string> colors_;
};

// Samples a chain graph over random labels, then places boxes by rejection so
// that every triplet's predicate matches the geometric rule.
inline ImageGraphPair generate_pair(const CorpusConfig& cfg, const Vocabulary& vocab, std::uint64_t seed,
                                    const std::string& id) {
  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(rng.integer(cfg.min_objects, cfg.max_objects));
  SceneGraph g;
  for (std::size_t i = 0; i < n; ++i)
    g.object_ids.push_back(vocab.objects.id(
        object_label(cfg.colors[rng.integer(0, cfg.colors.size() - 1)], cfg.shapes[rng.integer(0, cfg.shapes.size() - 1)])));
  std::vector<std::size_t> chain(n);
  std::iota(chain.begin(), chain.end(), 0);
  std::shuffle(chain.begin(), chain.end(), rng.engine());
  // A containment link is followed by a directional one, so no square holds two objects.
  auto is_containment = [](const std::string& p) { return p == "inside" || p == "surrounding"; };
  std::vector<std::string> directional;
  for (const auto& r : cfg.relations)
    if (!is_containment(r)) directional.push_back(r);
  bool after_containment = false;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto& pool = after_containment && !directional.empty() ? directional : cfg.relations;
    const auto& pred = pool[rng.integer(0, pool.size() - 1)];
    after_containment = is_containment(pred);
    g.triplets.push_back({chain[i], vocab.relations.id(pred), chain[i + 1]});
  }
  // containers must be squares of a colour different from their content
  for (const auto& t : g.triplets) {
    const auto& pred = vocab.relations.label(t.relation);
    if (pred != "inside" && pred != "surrounding") continue;
    const std::size_t inner = pred == "inside" ? t.subject : t.object;
    const std::size_t outer = pred == "inside" ? t.object : t.subject;
    std::string color = detail::color_of(vocab, g.object_ids[outer]);
    const std::string inner_color = detail::color_of(vocab, g.object_ids[inner]);
    if (color == inner_color) {
      auto it = std::find(cfg.colors.begin(), cfg.colors.end(), color);
      color = cfg.colors[(static_cast<std::size_t>(it - cfg.colors.begin()) + 1) % cfg.colors.size()];
    }
    g.object_ids[outer] = vocab.objects.id(object_label(color, "square"));
  }

  const int S = static_cast<int>(cfg.image_size);
  const int smin = std::max(3, static_cast<int>(std::lround(cfg.min_extent * S)));
  const int smax = std::max(smin, static_cast<int>(std::lround(cfg.max_extent * S)));
  auto random_box = [&](int side) {
    const int x0 = static_cast<int>(rng.integer(0, S - side));
    const int y0 = static_cast<int>(rng.integer(0, S - side));
    return PixelBox{x0, y0, x0 + side, y0 + side};
  };

  // A box on the side of `prev` that `pred` asks for, separated from it.
  auto directed_box = [&](const PixelBox& prev, const std::string& pred, int side) -> std::optional<PixelBox> {
    int xlo = 0, xhi = S - side, ylo = 0, yhi = S - side;
    if (pred == "left of") xlo = prev.x1 + 1;
    if (pred == "right of") xhi = prev.x0 - 1 - side;
    if (pred == "above") ylo = prev.y1 + 1;
    if (pred == "below") yhi = prev.y0 - 1 - side;
    if (xlo > xhi || ylo > yhi) return std::nullopt;
    const int x0 = static_cast<int>(rng.integer(xlo, xhi)), y0 = static_cast<int>(rng.integer(ylo, yhi));
    return PixelBox{x0, y0, x0 + side, y0 + side};
  };

  const ShapeColorDetector detector(vocab);
  for (std::size_t attempt = 0; attempt < cfg.max_retries; ++attempt) {
    std::vector<std::optional<PixelBox>> boxes(n);
    bool ok = true;
    boxes[chain[0]] = random_box(static_cast<int>(rng.integer(smin, smax)));
    for (std::size_t i = 0; i + 1 < n && ok; ++i) {
      const auto& t = g.triplets[i];
      const auto& pred = vocab.relations.label(t.relation);
      const PixelBox prev = *boxes[t.subject];
      if (pred == "inside") {  // the next box surrounds the previous one
        const int m = static_cast<int>(rng.integer(2, 4));
        PixelBox b{prev.x0 - m, prev.y0 - m, prev.x1 + m, prev.y1 + m};
        ok = b.x0 >= 0 && b.y0 >= 0 && b.x1 <= S && b.y1 <= S;
        boxes[t.object] = b;
      } else if (pred == "surrounding") {
        const int m = static_cast<int>(rng.integer(2, 4));
        PixelBox b{prev.x0 + m, prev.y0 + m, prev.x1 - m, prev.y1 - m};
        ok = b.w() >= 3 && b.h() >= 3;
        boxes[t.object] = b;
      } else {
        auto b = directed_box(prev, pred, static_cast<int>(rng.integer(smin, smax)));
        ok = b.has_value();
        boxes[t.object] = b;
      }
    }
    if (!ok) continue;
    std::vector<Placed> placed;
    for (std::size_t i = 0; i < n; ++i) placed.push_back({g.object_ids[i], *boxes[i]});
    for (const auto& t : g.triplets) {
      const Box a = to_normalized(*boxes[t.subject], g.object_ids[t.subject], cfg.image_size);
      const Box b = to_normalized(*boxes[t.object], g.object_ids[t.object], cfg.image_size);
      if (spatial_predicate(a, b) != vocab.relations.label(t.relation)) ok = false;
    }
    if (!ok || !detail::layout_renderable(placed, vocab)) continue;
    ImageGraphPair pair;
    pair.pair_id = id;
    pair.image = render(placed, vocab, cfg.image_size);
    // shapes too small to tell apart are redrawn
    auto found = detector.detect(pair.image), want = g.object_ids;
    std::sort(found.begin(), found.end());
    std::sort(want.begin(), want.end());
    if (found != want) continue;
    pair.graph = g;
    pair.ground_truth_objects = g.object_ids;
    return pair;
  }
  throw DataError("cannot place objects for graph '" + describe(g, vocab) + "' after " +
                  std::to_string(cfg.max_retries) + " attempts");
}

inline Dataset generate_toy_dataset(const CorpusConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  Dataset ds;
  ds.vocab = corpus_vocabulary(cfg);
  ds.pairs.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    ds.pairs.push_back(generate_pair(cfg, ds.vocab, derive_seed(seed, i), cfg.id_prefix + "_" + buf));
  }
  return ds;
}

}  // namespace sg2im::toy
