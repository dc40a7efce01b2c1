#pragma once

#include <fstream>

#include <json.hpp>

#include "unifeat/core.hpp"

namespace unifeat {

/// Single-file parameter archive: magic, a JSON manifest (version, kind,
/// free-form metadata, tensor directory), then raw float32 little-endian
/// data.
struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  int version = 1;
  std::string kind;  // "backbone" or "model"
  nlohmann::json meta;
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  TensorEntry* find(const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

constexpr char kCheckpointMagic[9] = "UFCKPT01";

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["version"] = ckpt.version;
  manifest["kind"] = ckpt.kind;
  manifest["meta"] = ckpt.meta;
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size() * sizeof(float);
  }
  manifest["tensors"] = dir;
  std::string mjson = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  uint64_t len = mjson.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& t : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw IoError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string mjson(len, '\0');
  in.read(mjson.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(mjson, nullptr, false);
  if (manifest.is_discarded()) throw IoError("corrupt checkpoint manifest: " + path);

  Checkpoint ckpt;
  ckpt.version = manifest.at("version").get<int>();
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    TensorEntry t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<int>>();
    t.data.resize(e.at("count").get<size_t>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint payload: " + path);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace unifeat
