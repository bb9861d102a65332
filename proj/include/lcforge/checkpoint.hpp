#pragma once

// Checkpoint container:
//   magic "LCFORGE1" (8 bytes)
//   u32 little-endian metadata length
//   UTF-8 JSON metadata (spec, config, registry manifest with shapes and
//     byte offsets, epoch, history, normalization stats)
//   concatenated little-endian float32 parameter blobs in manifest order
// Momentum buffers ride along as "momentum:<param>" entries so a resumed
// run is bit-identical to an uninterrupted one.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lcforge/model.hpp"
#include "lcforge/serialize.hpp"
#include "lcforge/trainer.hpp"

namespace lcforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

inline constexpr char kCheckpointMagic[9] = "LCFORGE1";
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void append_blob(std::vector<float>& blobs, json& manifest, const std::string& name,
                 const std::string& kind, const Tensor<T>& t, bool frozen) {
  json entry{{"name", name},
             {"kind", kind},
             {"shape", t.shape()},
             {"offset", blobs.size() * sizeof(float)},
             {"frozen", frozen}};
  manifest.push_back(std::move(entry));
  for (const auto v : t.values()) blobs.push_back(static_cast<float>(v));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ResNetLC<T>& model, const SgdState<T>& opt,
                     const TrainConfig& cfg, const std::vector<double>& channel_mean,
                     const std::vector<double>& channel_std, int64_t epoch,
                     const History& history) {
  const auto& registry = model.registry();
  if (!opt.velocity.empty() && opt.velocity.size() != registry.size()) {
    throw Error("optimizer state does not match the model registry");
  }

  std::vector<float> blobs;
  json manifest = json::array();
  for (const auto& e : registry) {
    detail::append_blob(blobs, manifest, e.name, e.is_buffer ? "buffer" : "param", e.tensor,
                        e.frozen);
  }
  for (size_t i = 0; i < registry.size(); ++i) {
    const auto& e = registry[i];
    if (e.is_buffer || e.frozen) continue;
    if (opt.velocity.empty()) continue;
    detail::append_blob(blobs, manifest, "momentum:" + e.name, "momentum", opt.velocity[i],
                        false);
  }

  json meta{{"format_version", kCheckpointVersion},
            {"spec", to_json(model.spec())},
            {"config", to_json(cfg)},
            {"epoch", epoch},
            {"history", to_json(history)},
            {"normalization", json{{"mean", channel_mean}, {"std", channel_std}}},
            {"manifest", std::move(manifest)}};
  const std::string meta_str = meta.dump();
  if (meta_str.size() > 0xFFFFFFFFull) throw Error("checkpoint metadata too large");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  const uint32_t len = static_cast<uint32_t>(meta_str.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  out.write(reinterpret_cast<const char*>(blobs.data()),
            static_cast<std::streamsize>(blobs.size() * sizeof(float)));
  if (!out.flush()) throw Error("failed flushing checkpoint " + path);
}

template <typename T>
struct LoadedCheckpoint {
  ModelSpec spec;
  TrainConfig cfg;
  int64_t epoch = 0;
  History history;
  std::vector<double> channel_mean, channel_std;
  ResNetLC<T> model;
  SgdState<T> opt;

  explicit LoadedCheckpoint(const ModelSpec& s, uint64_t seed) : spec(s), model(s, seed) {}
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ValidationError(path + ": bad checkpoint magic (want LCFORGE1)");
  }
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw ValidationError(path + ": truncated checkpoint header");
  std::string meta_str(len, '\0');
  in.read(meta_str.data(), len);
  if (!in) throw ValidationError(path + ": truncated checkpoint metadata");

  json meta;
  try {
    meta = json::parse(meta_str);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": corrupt checkpoint metadata: " + e.what());
  }
  if (meta.at("format_version").get<uint32_t>() != kCheckpointVersion) {
    throw ValidationError(path + ": unsupported checkpoint version " +
                          meta.at("format_version").dump());
  }

  std::vector<float> blobs;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(float) != 0) {
      throw ValidationError(path + ": blob section is not float32-aligned");
    }
    blobs.resize(rest.size() / sizeof(float));
    std::memcpy(blobs.data(), rest.data(), rest.size());
  }

  const ModelSpec spec = model_spec_from_json(meta.at("spec"));
  const TrainConfig cfg = train_config_from_json(meta.at("config"));
  LoadedCheckpoint<T> loaded(spec, cfg.seed);
  loaded.cfg = cfg;
  loaded.epoch = meta.at("epoch").get<int64_t>();
  loaded.history = history_from_json(meta.at("history"));
  loaded.channel_mean = meta.at("normalization").at("mean").get<std::vector<double>>();
  loaded.channel_std = meta.at("normalization").at("std").get<std::vector<double>>();
  loaded.opt.init(loaded.model);

  std::map<std::string, size_t> by_name;
  auto& registry = loaded.model.registry();
  for (size_t i = 0; i < registry.size(); ++i) by_name.emplace(registry[i].name, i);

  size_t param_entries = 0;
  for (const auto& entry : meta.at("manifest")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const size_t offset = entry.at("offset").get<size_t>();
    const int64_t n = shape_numel(shape);
    if (offset % sizeof(float) != 0 ||
        offset / sizeof(float) + static_cast<size_t>(n) > blobs.size()) {
      throw ValidationError(path + ": manifest entry '" + name + "' points outside the blob section");
    }
    const float* src = blobs.data() + offset / sizeof(float);

    const bool is_momentum = kind == "momentum";
    const std::string target_name = is_momentum ? name.substr(std::strlen("momentum:")) : name;
    auto it = by_name.find(target_name);
    if (it == by_name.end()) {
      throw ValidationError(path + ": manifest entry '" + name +
                            "' does not exist in a model built from the stored spec");
    }
    Tensor<T>& target = is_momentum ? loaded.opt.velocity[it->second] : registry[it->second].tensor;
    if (target.shape() != shape) {
      throw ValidationError(path + ": shape mismatch for '" + name + "': stored " +
                            shape_str(shape) + " vs model " + shape_str(target.shape()));
    }
    auto dst = target.values();
    for (int64_t j = 0; j < n; ++j) dst[static_cast<size_t>(j)] = static_cast<T>(src[j]);
    param_entries += !is_momentum;
  }
  if (param_entries != registry.size()) {
    throw ValidationError(path + ": checkpoint covers " + std::to_string(param_entries) +
                          " of " + std::to_string(registry.size()) + " model tensors");
  }
  return loaded;
}

}  // namespace lcforge
