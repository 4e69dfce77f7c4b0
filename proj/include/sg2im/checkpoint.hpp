#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sg2im/nn.hpp"
#include "sg2im/scenegraph.hpp"

namespace sg2im {

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

// A directory with manifest.json (names, shapes, byte offsets, config echo,
// step counter) and tensors.bin (little-endian float32, 64-byte aligned).
struct Checkpoint {
  std::map<std::string, Tensor<float>> tensors;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::size_t step = 0;

  void put(const std::string& prefix, const nn::ParamSet<float>& ps) {
    for (const auto& [name, v] : ps.items()) tensors[prefix + name] = v.value();
  }

  const Tensor<float>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    return it->second;
  }

  bool has_prefix(const std::string& prefix) const {
    auto it = tensors.lower_bound(prefix);
    return it != tensors.end() && it->first.rfind(prefix, 0) == 0;
  }

  // Every tensor under `prefix`, with the prefix stripped.
  nn::ParamSet<float> take(const std::string& prefix) const {
    nn::ParamSet<float> ps;
    for (auto it = tensors.lower_bound(prefix); it != tensors.end() && it->first.rfind(prefix, 0) == 0; ++it)
      ps.add(it->first.substr(prefix.size()), it->second);
    if (ps.size() == 0) throw CheckpointError("checkpoint has no tensors under '" + prefix + "'");
    return ps;
  }

  // Copies into existing parameters; names and shapes must match one to one.
  void restore(const std::string& prefix, nn::ParamSet<float>& ps) const {
    for (auto& [name, v] : ps.items()) {
      const auto& t = at(prefix + name);
      if (t.shape != v.shape())
        throw CheckpointError("tensor '" + prefix + name + "' has shape " + shape_str(t.shape) + ", expected " +
                              shape_str(v.shape()));
      v.mutable_value() = t;
    }
  }
};

inline constexpr const char* kCheckpointManifest = "manifest.json";
inline constexpr const char* kCheckpointPayload = "tensors.bin";
inline constexpr std::size_t kCheckpointAlign = 64;

namespace detail {
inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  std::vector<char> payload;
  for (const auto& [name, t] : ck.tensors) {
    const std::size_t offset = (payload.size() + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign;
    const std::size_t nbytes = t.size() * sizeof(float);
    payload.resize(offset + nbytes, 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(t[i]));
      std::memcpy(payload.data() + offset + i * 4, &bits, 4);
    }
    entries.push_back({{"name", name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
  }
  nlohmann::json manifest{{"format", "sg2im-checkpoint"},
                          {"version", 1},
                          {"step", ck.step},
                          {"config", ck.config},
                          {"meta", ck.meta},
                          {"payload", kCheckpointPayload},
                          {"payload_bytes", payload.size()},
                          {"tensors", entries}};
  {
    std::ofstream out(dir / kCheckpointPayload, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + (dir / kCheckpointPayload).string());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw CheckpointError("short write to " + (dir / kCheckpointPayload).string());
  }
  std::ofstream out(dir / kCheckpointManifest);
  if (!out) throw CheckpointError("cannot write " + (dir / kCheckpointManifest).string());
  out << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto mpath = dir / kCheckpointManifest;
  std::ifstream min(mpath);
  if (!min) throw CheckpointError("cannot open checkpoint manifest " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(min);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("corrupt checkpoint manifest " + mpath.string() + ": " + e.what());
  }

  Checkpoint ck;
  std::vector<char> payload;
  try {
    if (m.at("format") != "sg2im-checkpoint") throw CheckpointError("not a checkpoint manifest: " + mpath.string());
    ck.step = m.at("step").get<std::size_t>();
    ck.config = m.at("config");
    ck.meta = m.value("meta", nlohmann::json::object());
    const auto ppath = dir / m.at("payload").get<std::string>();
    std::ifstream pin(ppath, std::ios::binary);
    if (!pin) throw CheckpointError("cannot open checkpoint payload " + ppath.string());
    payload.assign(std::istreambuf_iterator<char>(pin), std::istreambuf_iterator<char>());

    for (const auto& e : m.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (e.at("dtype") != "f32") throw CheckpointError("tensor '" + name + "' has unsupported dtype");
      if (nbytes != shape_numel(shape) * sizeof(float))
        throw CheckpointError("tensor '" + name + "': byte count " + std::to_string(nbytes) + " disagrees with shape " +
                              shape_str(shape));
      if (offset % kCheckpointAlign != 0) throw CheckpointError("tensor '" + name + "': misaligned offset");
      if (offset + nbytes > payload.size())
        throw CheckpointError("tensor '" + name + "' extends past the end of the payload (" +
                              std::to_string(offset + nbytes) + " > " + std::to_string(payload.size()) + " bytes)");
      if (ck.tensors.count(name)) throw CheckpointError("tensor '" + name + "' listed twice");
      Tensor<float> t(shape);
      for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, payload.data() + offset + i * 4, 4);
        t[i] = std::bit_cast<float>(detail::to_little(bits));
      }
      ck.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint manifest " + mpath.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace sg2im
