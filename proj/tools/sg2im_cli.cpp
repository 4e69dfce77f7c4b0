#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sg2im/sg2im.hpp"

namespace fs = std::filesystem;
using namespace sg2im;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_text(const std::string& s, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << s;
}

RunConfig resolve_config(const std::string& config_path, const std::string& data_dir) {
  RunConfig c = config_path.empty() ? parse_config(nlohmann::json::object()) : load_config(config_path);
  if (!data_dir.empty()) c.data.manifest = data_dir;
  c = apply_environment(c);
  validate(c);
  return c;
}

RunConfig config_from_echo(const nlohmann::json& echo, const std::string& data_dir) {
  RunConfig c = parse_config(echo);
  if (!data_dir.empty()) c.data.manifest = data_dir;
  return apply_environment(c);
}

struct Options {
  std::string config, data, out, gca, checkpoint, samples, manifest, vocab;
  std::size_t count = 8, image_size = 0;
  std::uint64_t seed = 7;
  bool unconditional = false;
};

int synth_data(const Options& o, const CLI::App& sub) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  auto& t = c.data.toy;
  if (sub.count("--count")) t.count = o.count;
  if (sub.count("--seed")) c.data.seed = o.seed;
  if (sub.count("--image-size")) t.image_size = o.image_size;
  toy::check_config(t);
  auto ds = toy::generate_toy_dataset(t, c.data.seed);
  save_manifest(ds, o.out);
  std::cout << "wrote " << ds.pairs.size() << " pairs to " << (fs::path(o.out) / kManifestName).string() << '\n';
  return kOk;
}

int ingest(const Options& o) {
  fs::path p = o.manifest;
  if (fs::is_directory(p)) p /= kManifestName;
  std::optional<Vocabulary> vocab;
  if (!o.vocab.empty()) vocab = read_vocab(o.vocab);
  auto ds = load_manifest(p, vocab);
  std::size_t objects = 0, triplets = 0, max_objects = 0;
  for (const auto& pr : ds.pairs) {
    objects += pr.graph.object_ids.size();
    triplets += pr.graph.triplets.size();
    max_objects = std::max(max_objects, pr.graph.object_ids.size());
  }
  fs::create_directories(o.out);
  nlohmann::json summary{{"manifest", p.string()},
                         {"pairs", ds.pairs.size()},
                         {"objects", objects},
                         {"triplets", triplets},
                         {"max_objects_per_graph", max_objects},
                         {"vocab", vocab_to_json(ds.vocab)}};
  write_json(summary, fs::path(o.out) / "ingest.json");
  std::cout << "manifest ok: " << ds.pairs.size() << " pairs, " << ds.vocab.objects.size() << " object labels, "
            << ds.vocab.relations.size() << " relations\n";
  return kOk;
}

int train_gca(const Options& o) {
  const RunConfig c = resolve_config(o.config, o.data);
  Session s(c, load_data(c));
  fs::create_directories(o.out);
  std::ofstream hist(fs::path(o.out) / "history.jsonl");
  auto st = run_gca_stage(s, [&](const gca::GcaRecord& r) {
    hist << r.to_json().dump() << '\n';
    std::cout << r.to_json().dump() << std::endl;
  });
  save_checkpoint(gca_checkpoint(s, st), o.out);
  return kOk;
}

int finetune(const Options& o) {
  const RunConfig c = resolve_config(o.config, o.data);
  Session s(c, load_data(c));
  fs::create_directories(o.out);
  std::optional<GraphEncoder<float>> enc;
  if (c.ablation.use_gca) {
    if (!o.gca.empty()) {
      enc.emplace(encoder_from_checkpoint(s, load_checkpoint(o.gca)));
    } else {
      std::cout << "no --gca checkpoint given; running the GCA stage first\n";
      enc.emplace(std::move(run_gca_stage(s).encoder));
    }
  }
  auto model = build_model(s, enc ? &*enc : nullptr);
  std::ofstream log(fs::path(o.out) / "losses.jsonl");
  run_finetune(s, model, [&](std::size_t step, const LossBreakdown& l) {
    auto j = l.to_json();
    j["step"] = step;
    log << j.dump() << '\n';
    std::cout << j.dump() << std::endl;
  });
  save_checkpoint(model_checkpoint(s, model, c.finetune.steps), o.out);
  return kOk;
}

int sample_cmd(const Options& o) {
  const auto ck = load_checkpoint(o.checkpoint);
  const RunConfig c = config_from_echo(ck.config, o.data);
  Session s(c, load_data(c));
  if (ck.meta.contains("vocab") && !(vocab_from_json(ck.meta["vocab"]) == s.data.vocab))
    throw DataError("checkpoint vocabulary differs from the dataset vocabulary");
  auto model = model_from_checkpoint(s, ck);
  auto set = generate_samples(s, model, o.unconditional);
  save_samples(set, s.data.vocab, s.echo(), o.out);
  std::cout << "wrote " << set.items.size() << " samples to " << o.out << '\n';
  return kOk;
}

int evaluate_cmd(const Options& o) {
  auto loaded = load_samples(o.samples);
  const RunConfig c = config_from_echo(loaded.config, o.data);
  const Dataset data = load_data(c);
  if (!(loaded.vocab == data.vocab)) throw DataError("sample vocabulary differs from the dataset vocabulary");
  auto report = evaluate_samples(c, data, loaded.set);
  fs::create_directories(o.out);
  write_json(report.to_json(), fs::path(o.out) / "report.json");
  write_text(report.to_text(), fs::path(o.out) / "report.txt");
  std::cout << report.to_text();
  return kOk;
}

int ablate(const Options& o) {
  const RunConfig c = resolve_config(o.config, o.data);
  const Dataset data = load_data(c);
  fs::create_directories(o.out);
  auto rep = run_ablation(c, data, default_grid(), [](const AblationRow& r) {
    std::cout << r.name << ": " << (r.report ? "ok" : "failed: " + r.error) << std::endl;
  });
  write_json(rep.to_json(), fs::path(o.out) / "ablation.json");
  write_text(rep.to_text(), fs::path(o.out) / "ablation.txt");
  std::cout << rep.to_text();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-graph-to-image toolkit: GCA alignment, diffusion fine-tuning, sampling and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth-data", "Generate a toy shapes corpus");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of pairs");
  synth->add_option("--seed", o.seed, "Generator seed");
  synth->add_option("--image-size", o.image_size, "Image side in pixels");
  synth->add_option("--config", o.config, "Run config (JSON); data.toy supplies defaults");

  auto* ing = app.add_subcommand("ingest", "Validate a dataset manifest");
  ing->add_option("--manifest", o.manifest, "manifest.jsonl or its directory")->required();
  ing->add_option("--vocab", o.vocab, "Fixed vocabulary file");
  ing->add_option("--out", o.out, "Output directory for the summary")->required();

  auto* gca_cmd = app.add_subcommand("train-gca", "Adversarially align graph embeddings to image embeddings");
  auto* ft = app.add_subcommand("finetune", "Train the conditioned denoiser");
  auto* abl = app.add_subcommand("ablate", "Run the ablation grid");
  for (auto* sub : {gca_cmd, ft, abl}) {
    sub->add_option("--config", o.config, "Run config (JSON)");
    sub->add_option("--data", o.data, "Dataset directory; default generates the toy corpus");
    sub->add_option("--out", o.out, "Output directory")->required();
  }
  ft->add_option("--gca", o.gca, "GCA checkpoint directory");

  auto* smp = app.add_subcommand("sample", "Sample images from a fine-tuned checkpoint");
  smp->add_option("--checkpoint", o.checkpoint, "Fine-tuned checkpoint directory")->required();
  smp->add_option("--data", o.data, "Dataset directory (default: the checkpoint's config)");
  smp->add_option("--out", o.out, "Output directory")->required();
  smp->add_flag("--unconditional", o.unconditional, "Mask every conditioning token");

  auto* ev = app.add_subcommand("evaluate", "Compute IS, FID, DS and OOR for a sample directory");
  ev->add_option("--samples", o.samples, "Sample directory")->required();
  ev->add_option("--data", o.data, "Dataset directory (default: the samples' config)");
  ev->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*synth) return synth_data(o, *synth);
    if (*ing) return ingest(o);
    if (*gca_cmd) return train_gca(o);
    if (*ft) return finetune(o);
    if (*smp) return sample_cmd(o);
    if (*ev) return evaluate_cmd(o);
    if (*abl) return ablate(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
