#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/checkpoint.hpp"
#include "sg2im/config.hpp"
#include "sg2im/finetune.hpp"
#include "sg2im/gca.hpp"
#include "sg2im/http_provider.hpp"
#include "sg2im/metrics.hpp"
#include "sg2im/toy_corpus.hpp"

namespace sg2im {

inline Dataset load_data(const RunConfig& c) {
  if (c.data.manifest.empty()) return toy::generate_toy_dataset(c.data.toy, c.data.seed);
  std::filesystem::path p = c.data.manifest;
  if (std::filesystem::is_directory(p)) p /= kManifestName;
  return load_manifest(p);
}

inline std::unique_ptr<EmbeddingProvider> make_provider(const RunConfig& c) {
  if (c.provider.kind == "external") {
    HttpProviderConfig h;
    h.base_url = c.provider.base_url;
    h.path = c.provider.path;
    h.text_dim = c.provider.text_dim;
    h.image_dim = c.provider.image_dim;
    h.timeout_seconds = c.provider.timeout_seconds;
    h.retries = c.provider.retries;
    return std::make_unique<HttpEmbeddingProvider>(h);
  }
  return std::make_unique<StubEmbeddingProvider>(c.provider.text_dim, c.provider.image_dim, c.denoiser.channels,
                                                 c.provider.seed);
}

// Checks that the data fits the configured model.
inline void check_data(const RunConfig& c, const Dataset& d) {
  if (d.pairs.empty()) throw DataError("dataset is empty");
  for (const auto& p : d.pairs) {
    if (p.graph.object_ids.size() > c.conditioning.n_max)
      throw DataError("pair '" + p.pair_id + "' has " + std::to_string(p.graph.object_ids.size()) +
                      " objects, more than conditioning.n_max");
    if (p.image.channels != c.denoiser.channels || p.image.height != c.denoiser.image_size ||
        p.image.width != c.denoiser.image_size)
      throw DataError("pair '" + p.pair_id + "' image is " + std::to_string(p.image.height) + "x" +
                      std::to_string(p.image.width) + "x" + std::to_string(p.image.channels) +
                      ", denoiser expects " + std::to_string(c.denoiser.image_size) + "x" +
                      std::to_string(c.denoiser.image_size) + "x" + std::to_string(c.denoiser.channels));
  }
}

// Long-lived services shared by the stages of one run.
struct Session {
  RunConfig config;
  Dataset data;
  std::unique_ptr<EmbeddingProvider> provider;
  std::unique_ptr<TextEmbeddingCache> text;
  std::unique_ptr<ImageEmbeddingCache> images;
  diffusion::NoiseSchedule schedule;
  std::unique_ptr<diffusion::LatentCodec> codec;

  Session(RunConfig c, Dataset d) : config(std::move(c)), data(std::move(d)) {
    check_data(config, data);
    provider = make_provider(config);
    text = std::make_unique<TextEmbeddingCache>(*provider);
    images = std::make_unique<ImageEmbeddingCache>(*provider);
    schedule = schedule_of(config);
    codec = diffusion::make_codec(config.denoiser.codec);
  }

  nlohmann::json echo() const { return to_json(config); }

  std::vector<const ImageGraphPair*> pair_ptrs() const {
    std::vector<const ImageGraphPair*> out;
    for (const auto& p : data.pairs) out.push_back(&p);
    return out;
  }
};

// ---------------------------------------------------------------- GCA stage

struct GcaStage {
  GraphEncoder<float> encoder;
  gca::Discriminator<float> discriminator;
  gca::GcaResult result;
};

inline GcaStage run_gca_stage(const Session& s, const std::function<void(const gca::GcaRecord&)>& on_record = {}) {
  const auto& c = s.config;
  GcaStage st{GraphEncoder<float>::create(encoder_config(c, s.data.vocab), c.encoder.seed),
              gca::Discriminator<float>::create(discriminator_config(c), derive_seed(c.gca.seed, 1)),
              {}};
  st.result = gca::train_gca(s.data.pairs, st.encoder, st.discriminator, *s.images, gca_config(c), on_record);
  return st;
}

inline nlohmann::json history_json(const std::vector<gca::GcaRecord>& h) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : h) j.push_back(r.to_json());
  return j;
}

inline Checkpoint gca_checkpoint(const Session& s, const GcaStage& st) {
  Checkpoint ck;
  ck.config = s.echo();
  ck.step = st.result.history.empty() ? 0 : st.result.history.back().generator_steps;
  ck.meta = {{"stage", "gca"},
             {"vocab", vocab_to_json(s.data.vocab)},
             {"history", history_json(st.result.history)},
             {"bandwidths", st.result.bandwidths}};
  ck.put("encoder.", st.encoder.params());
  ck.put("discriminator.", st.discriminator.params());
  ck.put("discriminator_buffers.", st.discriminator.buffers());
  return ck;
}

inline GraphEncoder<float> encoder_from_checkpoint(const Session& s, const Checkpoint& ck) {
  auto enc = GraphEncoder<float>::create(encoder_config(s.config, s.data.vocab), s.config.encoder.seed);
  auto ps = enc.params();
  ck.restore("encoder.", ps);
  return enc;
}

// ---------------------------------------------------------------- fine-tuning stage

// Fresh model; the encoder starts from `pretrained` when given.
inline SceneModel<float> build_model(const Session& s, const GraphEncoder<float>* pretrained = nullptr) {
  const auto& c = s.config;
  auto enc = pretrained ? pretrained->clone()
                        : GraphEncoder<float>::create(encoder_config(c, s.data.vocab), c.encoder.seed);
  const auto cc = conditioning_config(c);
  return SceneModel<float>{
      std::move(enc),
      ConditioningBuilder<float>(
          cc, init_conditioning<float>(c.encoder.d_g, c.provider.text_dim, cc, c.conditioning.seed), *s.text),
      Denoiser<float>::create(denoiser_config(c), c.denoiser.seed)};
}

inline Checkpoint model_checkpoint(const Session& s, const SceneModel<float>& m, std::size_t step) {
  Checkpoint ck;
  ck.config = s.echo();
  ck.step = step;
  ck.meta = {{"stage", "finetune"}, {"vocab", vocab_to_json(s.data.vocab)}};
  ck.put("", m.parameters());
  return ck;
}

inline SceneModel<float> model_from_checkpoint(const Session& s, const Checkpoint& ck) {
  auto m = build_model(s);
  auto ps = m.parameters();
  ck.restore("", ps);
  return m;
}

inline FinetuneContext finetune_context(const Session& s) {
  return {s.data.vocab, *s.images, s.schedule, *s.codec,
          FinetuneSettings{loss_weights(s.config), {s.config.loss.bandwidths, s.config.loss.multi_scale}}};
}

// Batches are drawn with replacement from every pair.
inline std::vector<LossBreakdown> run_finetune(const Session& s, SceneModel<float>& m,
                                               const std::function<void(std::size_t, const LossBreakdown&)>& on_log = {}) {
  const auto& f = s.config.finetune;
  auto ctx = finetune_context(s);
  nn::Adam<float> opt(m.parameters().vars(), {f.lr, f.adam_beta1, f.adam_beta2, 1e-8});
  const auto n = static_cast<std::int64_t>(s.data.pairs.size());
  std::vector<LossBreakdown> log;
  for (std::size_t step = 0; step < f.steps; ++step) {
    Rng pick(derive_seed(f.seed, 2 * step));
    std::vector<const ImageGraphPair*> batch;
    for (std::size_t b = 0; b < f.batch_size; ++b) batch.push_back(&s.data.pairs[pick.integer(0, n - 1)]);
    auto l = train_step(batch, m, opt, ctx, derive_seed(f.seed, 2 * step + 1));
    log.push_back(l);
    if (on_log && (step % std::max<std::size_t>(f.log_every, 1) == 0 || step + 1 == f.steps)) on_log(step, l);
  }
  return log;
}

// ---------------------------------------------------------------- sampling stage

struct SampleItem {
  std::string pair_id;
  std::size_t index = 0;
  Image image;
};

struct SampleSet {
  std::vector<SampleItem> items;
  bool unconditional = false;
};

// Rounds to the 8-bit grid PNG files store, so in-memory and on-disk samples agree.
inline Image quantize8(Image img) {
  for (auto& v : img.data) v = static_cast<float>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)) / 255.f;
  return img;
}

inline constexpr std::size_t kSampleChunk = 32;

// per_graph samples for each of the leading `graphs` pairs. With
// `unconditional` every conditioning token is masked out.
inline SampleSet generate_samples(const Session& s, const SceneModel<float>& m, bool unconditional = false) {
  const auto& sc = s.config.sample;
  const std::size_t n = sc.graphs == 0 ? s.data.pairs.size() : std::min(sc.graphs, s.data.pairs.size());
  SampleSet out;
  out.unconditional = unconditional;
  std::vector<std::vector<Image>> per_pair(n);
  for (std::size_t k = 0; k < sc.per_graph; ++k) {
    for (std::size_t lo = 0; lo < n; lo += kSampleChunk) {
      const std::size_t hi = std::min(n, lo + kSampleChunk);
      std::vector<const SceneGraph*> gs;
      for (std::size_t i = lo; i < hi; ++i) gs.push_back(&s.data.pairs[i].graph);
      ConditioningBatch<float> cond;
      {
        ag::NoGradGuard guard;
        cond = condition_graphs(m, gs, s.data.vocab).tokens;
      }
      if (unconditional) cond = null_conditioning<float>(gs.size(), cond.tokens.dim(1), cond.tokens.dim(2));
      auto ims = sample(cond, m.denoiser, *s.codec, s.schedule, derive_seed(derive_seed(sc.seed, k), lo));
      for (std::size_t i = lo; i < hi; ++i) per_pair[i].push_back(quantize8(std::move(ims[i - lo])));
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < per_pair[i].size(); ++k)
      out.items.push_back({s.data.pairs[i].pair_id, k, std::move(per_pair[i][k])});
  return out;
}

inline constexpr const char* kSamplesIndex = "samples.json";

inline void save_samples(const SampleSet& set, const Vocabulary& vocab, const nlohmann::json& config,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : set.items) {
    const std::string rel = "images/" + it.pair_id + "_s" + std::to_string(it.index) + ".png";
    write_png(it.image, dir / rel);
    items.push_back({{"pair_id", it.pair_id}, {"index", it.index}, {"image_path", rel}});
  }
  nlohmann::json j{{"config", config},
                   {"vocab", vocab_to_json(vocab)},
                   {"unconditional", set.unconditional},
                   {"items", items}};
  std::ofstream out(dir / kSamplesIndex);
  if (!out) throw DataError("cannot write " + (dir / kSamplesIndex).string());
  out << j.dump(2) << '\n';
}

struct LoadedSamples {
  SampleSet set;
  Vocabulary vocab;
  nlohmann::json config;
};

inline LoadedSamples load_samples(const std::filesystem::path& dir) {
  std::ifstream in(dir / kSamplesIndex);
  if (!in) throw DataError("cannot open " + (dir / kSamplesIndex).string());
  LoadedSamples out;
  try {
    auto j = nlohmann::json::parse(in);
    out.vocab = vocab_from_json(j.at("vocab"));
    out.config = j.at("config");
    out.set.unconditional = j.value("unconditional", false);
    for (const auto& it : j.at("items"))
      out.set.items.push_back({it.at("pair_id").get<std::string>(), it.at("index").get<std::size_t>(),
                               read_png(dir / it.at("image_path").get<std::string>())});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sample index: " + std::string(e.what()));
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

inline metrics::MetricsReport evaluate_samples(const RunConfig& c, const Dataset& data, const SampleSet& samples) {
  if (samples.items.empty()) throw DataError("no samples to evaluate");
  std::map<std::string, const ImageGraphPair*> by_id;
  for (const auto& p : data.pairs) by_id[p.pair_id] = &p;

  std::vector<std::string> order;
  std::map<std::string, std::vector<const Image*>> groups;
  for (const auto& it : samples.items) {
    if (!by_id.count(it.pair_id)) throw DataError("sample refers to unknown pair '" + it.pair_id + "'");
    if (!groups.count(it.pair_id)) order.push_back(it.pair_id);
    groups[it.pair_id].push_back(&it.image);
  }

  const std::size_t channels = samples.items[0].image.channels;
  metrics::RandomProjectionFeatures features(data.vocab.objects.size(), c.metrics.feature_dim, channels, c.metrics.seed);
  toy::ShapeColorDetector detector(data.vocab);

  std::vector<std::vector<double>> probs, fake_feats, real_feats;
  for (const auto& it : samples.items) {
    probs.push_back(features.classify(it.image));
    fake_feats.push_back(features.extract(it.image));
  }
  for (const auto& id : order) real_feats.push_back(features.extract(by_id[id]->image));

  metrics::MetricsReport r;
  const auto is = metrics::inception_score_splits(probs, c.metrics.is_splits);
  r.is_mean = is.mean;
  r.is_std = is.stddev;
  if (real_feats.size() < 2) throw DataError("FID needs samples for at least two pairs");
  r.fid = metrics::fid(metrics::stack_rows(real_feats), metrics::stack_rows(fake_feats));

  double ds_sum = 0, oor_sum = 0;
  std::size_t ds_n = 0, oor_n = 0;
  for (const auto& id : order) {
    const auto& ims = groups[id];
    const auto& g = by_id[id]->graph;
    metrics::PairMetrics pm{id, std::nullopt, std::nullopt};
    if (ims.size() >= 2) {
      std::vector<Image> copies;
      for (const auto* im : ims) copies.push_back(*im);
      pm.ds = metrics::diversity_score(copies);
      ds_sum += *pm.ds, ++ds_n;
    }
    if (!g.object_ids.empty()) {
      double s = 0;
      for (const auto* im : ims) s += metrics::occurrence_ratio(g.object_ids, detector.detect(*im));
      pm.oor = s / static_cast<double>(ims.size());
      oor_sum += *pm.oor, ++oor_n;
    }
    r.per_pair.push_back(pm);
  }
  if (oor_n == 0) throw DataError("no evaluated graph has objects");
  r.ds_mean = ds_n ? ds_sum / static_cast<double>(ds_n) : 0.0;
  r.oor_mean = oor_sum / static_cast<double>(oor_n);
  r.config = to_json(c);
  return r;
}

// ---------------------------------------------------------------- whole pipeline

struct PipelineResult {
  std::vector<gca::GcaRecord> gca_history;
  std::vector<LossBreakdown> losses;
  metrics::MetricsReport report;
};

// GCA (unless disabled) -> fine-tune -> sample -> evaluate, in memory. A
// supplied encoder replaces the GCA stage.
inline PipelineResult run_pipeline(const RunConfig& c, const Dataset& data,
                                   const GraphEncoder<float>* pretrained = nullptr) {
  Session s(c, data);
  PipelineResult out;
  std::optional<GcaStage> st;
  if (c.ablation.use_gca && !pretrained) {
    st.emplace(run_gca_stage(s));
    out.gca_history = st->result.history;
    pretrained = &st->encoder;
  }
  auto model = build_model(s, c.ablation.use_gca ? pretrained : nullptr);
  out.losses = run_finetune(s, model);
  out.report = evaluate_samples(c, s.data, generate_samples(s, model));
  return out;
}

}  // namespace sg2im
