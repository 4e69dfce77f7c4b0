#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/denoiser.hpp"
#include "sg2im/gca.hpp"
#include "sg2im/graph_encoder.hpp"
#include "sg2im/http_provider.hpp"
#include "sg2im/objectives.hpp"
#include "sg2im/toy_corpus.hpp"

namespace sg2im {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSettings {
  std::string manifest;  // empty: generate the toy corpus below
  toy::CorpusConfig toy;
  std::uint64_t seed = 7;
};

struct ProviderSettings {
  std::string kind = "stub";  // stub | external
  std::size_t text_dim = 512;
  std::size_t image_dim = 512;
  std::uint64_t seed = 0x5eed;
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/embed";
  double timeout_seconds = 10.0;
  int retries = 2;
};

struct EncoderSettings {
  std::size_t d_o = 512, d_r = 512, hidden = 512, d_g = 512, layers = 5;
  bool normalize_output = true;
  std::uint64_t seed = 1;
};

struct GcaSettings {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  std::size_t disc_per_gen = 1;
  std::optional<std::size_t> generator_step_limit;
  double generator_lr = 1e-4;
  double discriminator_lr = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double holdout_fraction = 0.25;
  std::size_t eval_every = 1;
  std::string norm_pass = "joint";  // joint | separate
  std::size_t hidden1 = 256, hidden2 = 128;
  double leaky_slope = 0.2, dropout = 0.3, bn_momentum = 0.1;
  std::uint64_t seed = 11;
};

struct ConditioningSettings {
  std::size_t n_max = 10;
  std::size_t d_cond = 512;
  std::uint64_t seed = 2;
};

struct ScheduleSettings {
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct DenoiserSettings {
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t base_width = 32;
  std::vector<std::size_t> mults{1, 2};
  std::size_t groups = 8;
  std::size_t cross_attention_levels = 2;
  bool self_attention = true;
  std::string codec = "identity";
  std::uint64_t seed = 3;
};

struct LossSettings {
  double lambda = 0.7;
  double beta = 0.5;
  std::vector<double> bandwidths;  // empty: median heuristic
  bool multi_scale = false;
};

struct TrainingSettings {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::size_t log_every = 50;
  std::uint64_t seed = 5;
};

struct SamplingSettings {
  std::size_t graphs = 0;  // leading pairs to sample for; 0 means all
  std::size_t per_graph = 2;
  std::uint64_t seed = 1234;
};

struct MetricSettings {
  std::size_t feature_dim = 64;
  std::size_t is_splits = 1;
  std::uint64_t seed = 1234;
};

struct AblationToggles {
  bool use_gca = true;
  bool use_align = true;
  bool use_mmd = true;
};

struct RunConfig {
  DataSettings data;
  ProviderSettings provider;
  EncoderSettings encoder;
  GcaSettings gca;
  ConditioningSettings conditioning;
  ScheduleSettings schedule;
  DenoiserSettings denoiser;
  LossSettings loss;
  TrainingSettings finetune;
  SamplingSettings sample;
  MetricSettings metrics;
  AblationToggles ablation;
};

namespace detail {

// Reads known keys from one JSON object and rejects the rest.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void get(const char* key, std::optional<std::size_t>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    std::size_t v = 0;
    get(key, v);
    out = v;
  }

  const nlohmann::json* section(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key " + where_ + "." + k);
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.data.toy;
  nlohmann::json toy{{"count", t.count},           {"image_size", t.image_size}, {"channels", t.channels},
                     {"colors", t.colors},         {"shapes", t.shapes},         {"min_objects", t.min_objects},
                     {"max_objects", t.max_objects}, {"relations", t.relations}, {"min_extent", t.min_extent},
                     {"max_extent", t.max_extent}, {"max_retries", t.max_retries}, {"id_prefix", t.id_prefix}};
  nlohmann::json gca{{"epochs", c.gca.epochs},
                     {"batch_size", c.gca.batch_size},
                     {"disc_per_gen", c.gca.disc_per_gen},
                     {"generator_lr", c.gca.generator_lr},
                     {"discriminator_lr", c.gca.discriminator_lr},
                     {"adam_beta1", c.gca.adam_beta1},
                     {"adam_beta2", c.gca.adam_beta2},
                     {"holdout_fraction", c.gca.holdout_fraction},
                     {"eval_every", c.gca.eval_every},
                     {"norm_pass", c.gca.norm_pass},
                     {"hidden1", c.gca.hidden1},
                     {"hidden2", c.gca.hidden2},
                     {"leaky_slope", c.gca.leaky_slope},
                     {"dropout", c.gca.dropout},
                     {"bn_momentum", c.gca.bn_momentum},
                     {"seed", c.gca.seed}};
  gca["generator_step_limit"] =
      c.gca.generator_step_limit ? nlohmann::json(*c.gca.generator_step_limit) : nlohmann::json(nullptr);
  return {
      {"data", {{"manifest", c.data.manifest}, {"toy", toy}, {"seed", c.data.seed}}},
      {"provider",
       {{"kind", c.provider.kind},
        {"text_dim", c.provider.text_dim},
        {"image_dim", c.provider.image_dim},
        {"seed", c.provider.seed},
        {"base_url", c.provider.base_url},
        {"path", c.provider.path},
        {"timeout_seconds", c.provider.timeout_seconds},
        {"retries", c.provider.retries}}},
      {"encoder",
       {{"d_o", c.encoder.d_o},
        {"d_r", c.encoder.d_r},
        {"hidden", c.encoder.hidden},
        {"d_g", c.encoder.d_g},
        {"layers", c.encoder.layers},
        {"normalize_output", c.encoder.normalize_output},
        {"seed", c.encoder.seed}}},
      {"gca", gca},
      {"conditioning",
       {{"n_max", c.conditioning.n_max}, {"d_cond", c.conditioning.d_cond}, {"seed", c.conditioning.seed}}},
      {"schedule",
       {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
      {"denoiser",
       {{"channels", c.denoiser.channels},
        {"image_size", c.denoiser.image_size},
        {"base_width", c.denoiser.base_width},
        {"mults", c.denoiser.mults},
        {"groups", c.denoiser.groups},
        {"cross_attention_levels", c.denoiser.cross_attention_levels},
        {"self_attention", c.denoiser.self_attention},
        {"codec", c.denoiser.codec},
        {"seed", c.denoiser.seed}}},
      {"loss",
       {{"lambda", c.loss.lambda},
        {"beta", c.loss.beta},
        {"bandwidths", c.loss.bandwidths},
        {"multi_scale", c.loss.multi_scale}}},
      {"finetune",
       {{"steps", c.finetune.steps},
        {"batch_size", c.finetune.batch_size},
        {"lr", c.finetune.lr},
        {"adam_beta1", c.finetune.adam_beta1},
        {"adam_beta2", c.finetune.adam_beta2},
        {"log_every", c.finetune.log_every},
        {"seed", c.finetune.seed}}},
      {"sample", {{"graphs", c.sample.graphs}, {"per_graph", c.sample.per_graph}, {"seed", c.sample.seed}}},
      {"metrics",
       {{"feature_dim", c.metrics.feature_dim}, {"is_splits", c.metrics.is_splits}, {"seed", c.metrics.seed}}},
      {"ablation",
       {{"use_gca", c.ablation.use_gca}, {"use_align", c.ablation.use_align}, {"use_mmd", c.ablation.use_mmd}}},
  };
}

inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.loss.lambda >= 0 && c.loss.lambda <= 1, "loss.lambda must lie in [0, 1]");
  need(c.loss.beta >= 0 && c.loss.beta <= 1, "loss.beta must lie in [0, 1]");
  for (double s : c.loss.bandwidths) need(s > 0, "loss.bandwidths must be positive");
  need(c.provider.kind == "stub" || c.provider.kind == "external", "provider.kind must be stub or external");
  need(c.gca.norm_pass == "joint" || c.gca.norm_pass == "separate", "gca.norm_pass must be joint or separate");
  need(c.encoder.d_g == c.provider.image_dim,
       "encoder.d_g (" + std::to_string(c.encoder.d_g) + ") must equal provider.image_dim (" +
           std::to_string(c.provider.image_dim) + ")");
  need(c.encoder.layers >= 1, "encoder.layers must be >= 1");
  need(c.conditioning.n_max >= 1, "conditioning.n_max must be >= 1");
  need(c.denoiser.channels == c.data.toy.channels || !c.data.manifest.empty(),
       "denoiser.channels must equal data.toy.channels");
  need(c.denoiser.image_size == c.data.toy.image_size || !c.data.manifest.empty(),
       "denoiser.image_size must equal data.toy.image_size");
  need(c.data.toy.max_objects <= c.conditioning.n_max || !c.data.manifest.empty(),
       "data.toy.max_objects exceeds conditioning.n_max");
  need(c.schedule.T >= 1, "schedule.T must be >= 1");
  need(c.finetune.batch_size >= 2, "finetune.batch_size must be >= 2 (MMD needs a sample of embeddings)");
  need(c.finetune.lr > 0, "finetune.lr must be positive");
  need(c.sample.per_graph >= 2, "sample.per_graph must be >= 2 (diversity score needs two samples)");
  need(c.metrics.feature_dim >= 1 && c.metrics.is_splits >= 1, "metrics sizes must be positive");
  try {
    check_denoiser_config(DenoiserConfig{c.denoiser.channels, c.denoiser.image_size, c.denoiser.base_width,
                                         c.denoiser.mults, c.conditioning.d_cond, c.denoiser.groups,
                                         c.denoiser.cross_attention_levels, c.denoiser.self_attention});
    diffusion::make_schedule(c.schedule.T, c.schedule.beta_start, c.schedule.beta_end);
    diffusion::make_codec(c.denoiser.codec);
    toy::check_config(c.data.toy);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::SectionReader root(j, "config");
  if (const auto* s = root.section("data")) {
    detail::SectionReader r(*s, "data");
    r.get("manifest", c.data.manifest);
    r.get("seed", c.data.seed);
    if (const auto* ts = r.section("toy")) {
      detail::SectionReader t(*ts, "data.toy");
      auto& y = c.data.toy;
      t.get("count", y.count);
      t.get("image_size", y.image_size);
      t.get("channels", y.channels);
      t.get("colors", y.colors);
      t.get("shapes", y.shapes);
      t.get("min_objects", y.min_objects);
      t.get("max_objects", y.max_objects);
      t.get("relations", y.relations);
      t.get("min_extent", y.min_extent);
      t.get("max_extent", y.max_extent);
      t.get("max_retries", y.max_retries);
      t.get("id_prefix", y.id_prefix);
      t.finish();
    }
    r.finish();
  }
  if (const auto* s = root.section("provider")) {
    detail::SectionReader r(*s, "provider");
    auto& p = c.provider;
    r.get("kind", p.kind);
    r.get("text_dim", p.text_dim);
    r.get("image_dim", p.image_dim);
    r.get("seed", p.seed);
    r.get("base_url", p.base_url);
    r.get("path", p.path);
    r.get("timeout_seconds", p.timeout_seconds);
    r.get("retries", p.retries);
    r.finish();
  }
  if (const auto* s = root.section("encoder")) {
    detail::SectionReader r(*s, "encoder");
    auto& e = c.encoder;
    r.get("d_o", e.d_o);
    r.get("d_r", e.d_r);
    r.get("hidden", e.hidden);
    r.get("d_g", e.d_g);
    r.get("layers", e.layers);
    r.get("normalize_output", e.normalize_output);
    r.get("seed", e.seed);
    r.finish();
  }
  if (const auto* s = root.section("gca")) {
    detail::SectionReader r(*s, "gca");
    auto& g = c.gca;
    r.get("epochs", g.epochs);
    r.get("batch_size", g.batch_size);
    r.get("disc_per_gen", g.disc_per_gen);
    r.get("generator_step_limit", g.generator_step_limit);
    r.get("generator_lr", g.generator_lr);
    r.get("discriminator_lr", g.discriminator_lr);
    r.get("adam_beta1", g.adam_beta1);
    r.get("adam_beta2", g.adam_beta2);
    r.get("holdout_fraction", g.holdout_fraction);
    r.get("eval_every", g.eval_every);
    r.get("norm_pass", g.norm_pass);
    r.get("hidden1", g.hidden1);
    r.get("hidden2", g.hidden2);
    r.get("leaky_slope", g.leaky_slope);
    r.get("dropout", g.dropout);
    r.get("bn_momentum", g.bn_momentum);
    r.get("seed", g.seed);
    r.finish();
  }
  if (const auto* s = root.section("conditioning")) {
    detail::SectionReader r(*s, "conditioning");
    r.get("n_max", c.conditioning.n_max);
    r.get("d_cond", c.conditioning.d_cond);
    r.get("seed", c.conditioning.seed);
    r.finish();
  }
  if (const auto* s = root.section("schedule")) {
    detail::SectionReader r(*s, "schedule");
    r.get("T", c.schedule.T);
    r.get("beta_start", c.schedule.beta_start);
    r.get("beta_end", c.schedule.beta_end);
    r.finish();
  }
  if (const auto* s = root.section("denoiser")) {
    detail::SectionReader r(*s, "denoiser");
    auto& d = c.denoiser;
    r.get("channels", d.channels);
    r.get("image_size", d.image_size);
    r.get("base_width", d.base_width);
    r.get("mults", d.mults);
    r.get("groups", d.groups);
    r.get("cross_attention_levels", d.cross_attention_levels);
    r.get("self_attention", d.self_attention);
    r.get("codec", d.codec);
    r.get("seed", d.seed);
    r.finish();
  }
  if (const auto* s = root.section("loss")) {
    detail::SectionReader r(*s, "loss");
    r.get("lambda", c.loss.lambda);
    r.get("beta", c.loss.beta);
    r.get("bandwidths", c.loss.bandwidths);
    r.get("multi_scale", c.loss.multi_scale);
    r.finish();
  }
  if (const auto* s = root.section("finetune")) {
    detail::SectionReader r(*s, "finetune");
    auto& f = c.finetune;
    r.get("steps", f.steps);
    r.get("batch_size", f.batch_size);
    r.get("lr", f.lr);
    r.get("adam_beta1", f.adam_beta1);
    r.get("adam_beta2", f.adam_beta2);
    r.get("log_every", f.log_every);
    r.get("seed", f.seed);
    r.finish();
  }
  if (const auto* s = root.section("sample")) {
    detail::SectionReader r(*s, "sample");
    r.get("graphs", c.sample.graphs);
    r.get("per_graph", c.sample.per_graph);
    r.get("seed", c.sample.seed);
    r.finish();
  }
  if (const auto* s = root.section("metrics")) {
    detail::SectionReader r(*s, "metrics");
    r.get("feature_dim", c.metrics.feature_dim);
    r.get("is_splits", c.metrics.is_splits);
    r.get("seed", c.metrics.seed);
    r.finish();
  }
  if (const auto* s = root.section("ablation")) {
    detail::SectionReader r(*s, "ablation");
    r.get("use_gca", c.ablation.use_gca);
    r.get("use_align", c.ablation.use_align);
    r.get("use_mmd", c.ablation.use_mmd);
    r.finish();
  }
  root.finish();
  return c;
}

// Dropping a loss term pins its weight: without L_align the reconstruction
// weight becomes 1, without L_MMD the CLIP weight becomes 1.
inline RunConfig resolve_toggles(RunConfig c) {
  if (!c.ablation.use_align) c.loss.lambda = 1.0;
  if (!c.ablation.use_mmd) c.loss.beta = 1.0;
  return c;
}

// Parses, applies the ablation toggles and validates.
inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig c = resolve_toggles(from_json(j));
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

inline constexpr const char* kEndpointEnv = "SG2IM_EMBEDDING_ENDPOINT";

// A set endpoint variable selects the external provider at that base URL.
inline RunConfig apply_environment(RunConfig c) {
  if (const char* url = std::getenv(kEndpointEnv); url && *url) {
    c.provider.kind = "external";
    c.provider.base_url = url;
  }
  return c;
}

inline GraphEncoderConfig encoder_config(const RunConfig& c, const Vocabulary& vocab) {
  GraphEncoderConfig e;
  e.num_objects = vocab.objects.size();
  e.num_relations = vocab.relations.size();
  e.d_o = c.encoder.d_o;
  e.d_r = c.encoder.d_r;
  e.hidden = c.encoder.hidden;
  e.d_g = c.encoder.d_g;
  e.layers = c.encoder.layers;
  e.normalize_output = c.encoder.normalize_output;
  return e;
}

inline gca::DiscriminatorConfig discriminator_config(const RunConfig& c) {
  return {c.provider.image_dim, c.gca.hidden1, c.gca.hidden2, c.gca.leaky_slope, c.gca.dropout, c.gca.bn_momentum};
}

inline gca::GcaConfig gca_config(const RunConfig& c) {
  gca::GcaConfig g;
  g.epochs = c.gca.epochs;
  g.batch_size = c.gca.batch_size;
  g.disc_per_gen = c.gca.disc_per_gen;
  g.generator_step_limit = c.gca.generator_step_limit;
  g.generator_adam = {c.gca.generator_lr, c.gca.adam_beta1, c.gca.adam_beta2, 1e-8};
  g.discriminator_adam = {c.gca.discriminator_lr, c.gca.adam_beta1, c.gca.adam_beta2, 1e-8};
  g.holdout_fraction = c.gca.holdout_fraction;
  g.eval_every = c.gca.eval_every;
  g.norm_pass = c.gca.norm_pass == "separate" ? gca::NormPass::kSeparate : gca::NormPass::kJoint;
  g.kernel = {c.loss.bandwidths, c.loss.multi_scale};
  g.seed = c.gca.seed;
  return g;
}

inline ConditioningConfig conditioning_config(const RunConfig& c) { return {c.conditioning.n_max, c.conditioning.d_cond}; }

inline DenoiserConfig denoiser_config(const RunConfig& c) {
  return {c.denoiser.channels,       c.denoiser.image_size, c.denoiser.base_width,
          c.denoiser.mults,          c.conditioning.d_cond, c.denoiser.groups,
          c.denoiser.cross_attention_levels, c.denoiser.self_attention};
}

inline diffusion::NoiseSchedule schedule_of(const RunConfig& c) {
  return diffusion::make_schedule(c.schedule.T, c.schedule.beta_start, c.schedule.beta_end);
}

inline objectives::LossWeights loss_weights(const RunConfig& c) { return {c.loss.lambda, c.loss.beta}; }

}  // namespace sg2im
