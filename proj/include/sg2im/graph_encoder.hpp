#pragma once

#include <string>
#include <vector>

#include "sg2im/nn.hpp"
#include "sg2im/scenegraph.hpp"

namespace sg2im {

struct GraphEncoderConfig {
  std::size_t num_objects = 0;    // object vocabulary size
  std::size_t num_relations = 0;  // relation vocabulary size
  std::size_t d_o = 512;          // object embedding width
  std::size_t d_r = 512;          // relation embedding width
  std::size_t hidden = 512;       // graph-conv width
  std::size_t d_g = 512;          // global embedding width
  std::size_t layers = 5;
  bool normalize_output = true;  // place the global embedding on the unit sphere
  bool operator==(const GraphEncoderConfig&) const = default;
};

// Per-node and per-triplet embeddings flowing through the graph-conv stack.
template <typename T>
struct NodeEdgeState {
  ag::Var<T> objects;    // [N_O, width]
  ag::Var<T> relations;  // [N_T, width]
};

template <typename T>
nn::ParamSet<T> init_graph_encoder(const GraphEncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.layers < 1) throw std::invalid_argument("graph encoder needs at least one layer");
  if (cfg.num_objects == 0 || cfg.num_relations == 0) throw std::invalid_argument("graph encoder needs vocabularies");
  Rng rng(seed);
  nn::ParamSet<T> ps;
  const std::size_t d = cfg.hidden;
  const double he = std::sqrt(6.0);
  ps.add("obj_embedding", nn::normal_init<T>({cfg.num_objects, cfg.d_o}, 1.0, rng));
  ps.add("rel_embedding", nn::normal_init<T>({cfg.num_relations, cfg.d_r}, 1.0, rng));
  if (cfg.d_o != d) nn::Linear<T>::init(ps, "obj_in", cfg.d_o, d, rng, he);
  if (cfg.d_r != d) nn::Linear<T>::init(ps, "rel_in", cfg.d_r, d, rng, he);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    nn::Linear<T>::init(ps, p + "triplet.trunk", 3 * d, d, rng, he);
    nn::Linear<T>::init(ps, p + "triplet.subject", d, d, rng, he);
    nn::Linear<T>::init(ps, p + "triplet.relation", d, d, rng, he);
    nn::Linear<T>::init(ps, p + "triplet.object", d, d, rng, he);
    nn::Mlp2<T>::init(ps, p + "object", d, d, d, rng, he);
  }
  nn::Mlp2<T>::init(ps, "map_obj", d, cfg.d_g, cfg.d_g, rng, he);
  nn::Mlp2<T>::init(ps, "map_rel", d, cfg.d_g, cfg.d_g, rng, he);
  nn::Linear<T>::init(ps, "projection", 2 * cfg.d_g, cfg.d_g, rng);
  return ps;
}

// Graph convolution encoder producing one d_g vector per scene graph.
//
// Each layer runs a triplet network on concat(subject, relation, object):
// a shared trunk followed by three heads giving a subject candidate, the
// updated relation, and an object candidate. Candidates pass through the
// object network and are averaged per node; nodes without triplets apply the
// object network to their own embedding. The global embedding projects the
// concatenation of the pooled object embeddings and the pooled triplet
// embeddings map_obj(s) + map_rel(r) + map_obj(o).
template <typename T>
class GraphEncoder {
 public:
  struct Layer {
    nn::Linear<T> trunk, subject, relation, object;
    nn::Mlp2<T> object_net;
  };

  GraphEncoder(GraphEncoderConfig cfg, nn::ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
    const std::size_t d = cfg_.hidden;
    obj_table_ = params_.get("obj_embedding", {cfg_.num_objects, cfg_.d_o});
    rel_table_ = params_.get("rel_embedding", {cfg_.num_relations, cfg_.d_r});
    if (cfg_.d_o != d) obj_in_ = nn::Linear<T>::bind(params_, "obj_in");
    if (cfg_.d_r != d) rel_in_ = nn::Linear<T>::bind(params_, "rel_in");
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer layer{nn::Linear<T>::bind(params_, p + "triplet.trunk"), nn::Linear<T>::bind(params_, p + "triplet.subject"),
                  nn::Linear<T>::bind(params_, p + "triplet.relation"),
                  nn::Linear<T>::bind(params_, p + "triplet.object"), nn::Mlp2<T>::bind(params_, p + "object", true)};
      if (layer.trunk.in != 3 * d || layer.trunk.out != d) throw ShapeError("triplet trunk of layer " + p + " mis-sized");
      layers_.push_back(layer);
    }
    map_obj_ = nn::Mlp2<T>::bind(params_, "map_obj", false);
    map_rel_ = nn::Mlp2<T>::bind(params_, "map_rel", false);
    projection_ = nn::Linear<T>::bind(params_, "projection");
    if (projection_.in != 2 * cfg_.d_g || projection_.out != cfg_.d_g) throw ShapeError("projection mis-sized");
  }

  static GraphEncoder create(const GraphEncoderConfig& cfg, std::uint64_t seed) {
    return GraphEncoder(cfg, init_graph_encoder<T>(cfg, seed));
  }

  GraphEncoder clone() const { return GraphEncoder(cfg_, params_.deep_copy()); }

  const GraphEncoderConfig& config() const { return cfg_; }
  const nn::ParamSet<T>& params() const { return params_; }
  const std::vector<Layer>& layers() const { return layers_; }

  NodeEdgeState<T> embed_labels(const SceneGraph& g) const {
    std::vector<std::size_t> rel_ids;
    for (const auto& t : g.triplets) rel_ids.push_back(t.relation);
    return {ag::gather_rows(obj_table_, g.object_ids), ag::gather_rows(rel_table_, rel_ids)};
  }

  // Maps table widths (d_o, d_r) to the graph-conv width when they differ.
  NodeEdgeState<T> project_inputs(NodeEdgeState<T> s) const {
    if (obj_in_.weight.defined()) s.objects = obj_in_(s.objects);
    if (rel_in_.weight.defined()) s.relations = rel_in_(s.relations);
    return s;
  }

  NodeEdgeState<T> conv_layer(const NodeEdgeState<T>& s, const SceneGraph& g, std::size_t l) const {
    return apply_layer(layers_.at(l), s, g);
  }

  static NodeEdgeState<T> apply_layer(const Layer& layer, const NodeEdgeState<T>& s, const SceneGraph& g) {
    const std::size_t n_obj = g.object_ids.size(), n_trip = g.triplets.size();
    if (s.objects.dim(0) != n_obj || s.relations.dim(0) != n_trip)
      throw ShapeError("node/edge state does not match graph");
    std::vector<bool> isolated(n_obj, true);
    NodeEdgeState<T> out;
    ag::Var<T> pooled;
    if (n_trip > 0) {
      std::vector<std::size_t> subj, obj;
      for (const auto& t : g.triplets) {
        subj.push_back(t.subject);
        obj.push_back(t.object);
        isolated[t.subject] = isolated[t.object] = false;
      }
      auto x = ag::concat<T>({ag::gather_rows(s.objects, subj), s.relations, ag::gather_rows(s.objects, obj)}, 1);
      auto h = ag::relu(layer.trunk(x));
      auto subj_cand = layer.object_net(ag::relu(layer.subject(h)));
      out.relations = ag::relu(layer.relation(h));
      auto obj_cand = layer.object_net(ag::relu(layer.object(h)));
      std::vector<std::size_t> seg = subj;
      seg.insert(seg.end(), obj.begin(), obj.end());
      pooled = ag::segment_mean(ag::concat<T>({subj_cand, obj_cand}, 0), seg, n_obj);
    } else {
      out.relations = s.relations;
    }
    if (std::find(isolated.begin(), isolated.end(), true) == isolated.end()) {
      out.objects = pooled;
    } else {
      auto self_update = layer.object_net(s.objects);
      out.objects = pooled.defined() ? ag::select_rows(pooled, self_update, isolated) : self_update;
    }
    return out;
  }

  // map_obj(G_s) + map_rel(G_r) + map_obj(G_o) for one triplet.
  ag::Var<T> triplet_embedding(const NodeEdgeState<T>& s, const SceneGraph& g, std::size_t k) const {
    if (k >= g.triplets.size()) throw std::out_of_range("triplet index " + std::to_string(k) + " out of range");
    const auto& t = g.triplets[k];
    auto subj = map_obj_(ag::gather_rows(s.objects, {t.subject}));
    auto rel = map_rel_(ag::slice(s.relations, 0, k, 1));
    auto obj = map_obj_(ag::gather_rows(s.objects, {t.object}));
    return ag::add(ag::add(subj, rel), obj);
  }

  NodeEdgeState<T> run_layers(const SceneGraph& g) const {
    auto s = project_inputs(embed_labels(g));
    for (const auto& layer : layers_) s = apply_layer(layer, s, g);
    return s;
  }

  // [1, d_g]
  ag::Var<T> encode(const SceneGraph& g) const {
    if (g.triplets.empty()) throw DataError("graph has no relationships");
    auto s = run_layers(g);
    auto obj_g = map_obj_(s.objects);
    std::vector<std::size_t> subj, obj;
    for (const auto& t : g.triplets) {
      subj.push_back(t.subject);
      obj.push_back(t.object);
    }
    auto trip = ag::add(ag::add(ag::gather_rows(obj_g, subj), map_rel_(s.relations)), ag::gather_rows(obj_g, obj));
    auto pooled = ag::concat<T>({ag::mean_rows(obj_g), ag::mean_rows(trip)}, 1);
    auto out = projection_(pooled);
    return cfg_.normalize_output ? ag::l2_normalize_rows(out) : out;
  }

  // [B, d_g]
  ag::Var<T> encode_batch(const std::vector<const SceneGraph*>& graphs) const {
    std::vector<ag::Var<T>> rows;
    for (const auto* g : graphs) rows.push_back(encode(*g));
    return ag::concat<T>(rows, 0);
  }

 private:
  GraphEncoderConfig cfg_;
  nn::ParamSet<T> params_;
  ag::Var<T> obj_table_, rel_table_;
  nn::Linear<T> obj_in_, rel_in_;
  std::vector<Layer> layers_;
  nn::Mlp2<T> map_obj_, map_rel_;
  nn::Linear<T> projection_;
};

}  // namespace sg2im
