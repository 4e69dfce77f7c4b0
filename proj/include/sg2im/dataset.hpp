#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/image.hpp"
#include "sg2im/scenegraph.hpp"

namespace sg2im {

struct ImageGraphPair {
  std::string pair_id;
  Image image;
  SceneGraph graph;
  std::optional<std::vector<std::size_t>> ground_truth_objects;
};

struct Dataset {
  Vocabulary vocab;
  std::vector<ImageGraphPair> pairs;
};

// ---------------------------------------------------------------- vocabulary files

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  return {{"objects", v.objects.labels()}, {"relations", v.relations.labels()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  try {
    return Vocabulary{LabelSet(j.at("objects").get<std::vector<std::string>>()),
                      LabelSet(j.at("relations").get<std::vector<std::string>>())};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary: ") + e.what());
  }
}

inline Vocabulary read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  try {
    return vocab_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed vocabulary " + path.string() + ": " + e.what());
  }
}

inline void write_vocab(const Vocabulary& v, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << vocab_to_json(v).dump(2) << '\n';
}

// ---------------------------------------------------------------- manifest
//
// One JSON object per line:
//   {"id": ..., "image_path": ..., "objects": [label...],
//    "triplets": [[s_idx, predicate, o_idx]...], "gt_objects": [label...]}
// Image paths are relative to the manifest directory. A vocab.json next to the
// manifest, when present, fixes label ids.

inline constexpr const char* kManifestName = "manifest.jsonl";
inline constexpr const char* kVocabName = "vocab.json";

namespace detail {
inline std::size_t lookup_or_grow(LabelSet& set, const std::string& label, bool grow, std::size_t record,
                                  const char* kind) {
  if (grow) return set.add_if_missing(label);
  auto id = set.find(label);
  if (!id) throw DataError("record " + std::to_string(record) + ": unknown " + kind + " label '" + label + "'");
  return *id;
}
}  // namespace detail

// Loads pairs in file order. With `vocab` given, every label must belong to it.
inline Dataset load_manifest(const std::filesystem::path& manifest_path,
                             std::optional<Vocabulary> vocab = std::nullopt) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  const auto dir = manifest_path.parent_path();
  Dataset ds;
  bool grow = false;
  if (vocab) {
    ds.vocab = *vocab;
  } else if (std::filesystem::exists(dir / kVocabName)) {
    ds.vocab = read_vocab(dir / kVocabName);
  } else {
    grow = true;
  }

  std::set<std::string> ids;
  std::string line;
  std::size_t record = 0;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "record " + std::to_string(record) + " (line " + std::to_string(lineno) + ")";
    ImageGraphPair pair;
    try {
      auto j = nlohmann::json::parse(line);
      pair.pair_id = j.at("id").get<std::string>();
      if (!ids.insert(pair.pair_id).second) throw DataError(where + ": duplicate id '" + pair.pair_id + "'");
      for (const auto& l : j.at("objects"))
        pair.graph.object_ids.push_back(
            detail::lookup_or_grow(ds.vocab.objects, l.get<std::string>(), grow, record, "object"));
      for (const auto& t : j.at("triplets")) {
        if (!t.is_array() || t.size() != 3) throw DataError(where + ": triplet must be [s, predicate, o]");
        pair.graph.triplets.push_back(
            {t[0].get<std::size_t>(),
             detail::lookup_or_grow(ds.vocab.relations, t[1].get<std::string>(), grow, record, "relation"),
             t[2].get<std::size_t>()});
      }
      if (j.contains("gt_objects") && !j["gt_objects"].is_null()) {
        std::vector<std::size_t> gt;
        for (const auto& l : j["gt_objects"])
          gt.push_back(detail::lookup_or_grow(ds.vocab.objects, l.get<std::string>(), grow, record, "object"));
        pair.ground_truth_objects = std::move(gt);
      }
      auto violations = validate(pair.graph, ds.vocab);
      if (!violations.empty()) throw DataError(where + ": " + violations.front().message);
      pair.image = read_png(dir / j.at("image_path").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": malformed record: " + e.what());
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.rfind("record ", 0) == 0) throw;
      throw DataError(where + ": " + msg);
    }
    ds.pairs.push_back(std::move(pair));
    ++record;
  }
  return ds;
}

inline nlohmann::json pair_record(const ImageGraphPair& p, const Vocabulary& vocab, const std::string& image_path) {
  nlohmann::json j;
  j["id"] = p.pair_id;
  j["image_path"] = image_path;
  j["objects"] = nlohmann::json::array();
  for (auto id : p.graph.object_ids) j["objects"].push_back(vocab.objects.label(id));
  j["triplets"] = nlohmann::json::array();
  for (const auto& t : p.graph.triplets)
    j["triplets"].push_back({t.subject, vocab.relations.label(t.relation), t.object});
  if (p.ground_truth_objects) {
    j["gt_objects"] = nlohmann::json::array();
    for (auto id : *p.ground_truth_objects) j["gt_objects"].push_back(vocab.objects.label(id));
  }
  return j;
}

// Writes <dir>/manifest.jsonl, <dir>/vocab.json and <dir>/images/<id>.png.
inline std::filesystem::path save_manifest(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  write_vocab(ds.vocab, dir / kVocabName);
  const auto manifest = dir / kManifestName;
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write " + manifest.string());
  for (const auto& p : ds.pairs) {
    const std::string rel = "images/" + p.pair_id + ".png";
    write_png(p.image, dir / rel);
    out << pair_record(p, ds.vocab, rel).dump() << '\n';
  }
  return manifest;
}

}  // namespace sg2im
