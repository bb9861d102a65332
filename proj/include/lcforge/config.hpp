#pragma once

// Run configuration: JSON file merged with command-line overrides. Every
// field is validated before any compute; unknown keys fail fast.

#include <optional>
#include <set>
#include <string>

#include "lcforge/serialize.hpp"

namespace lcforge {

struct RunConfig {
  std::string dataset = "cifar10";  // cifar10 | mnist
  std::string data_dir;
  std::string out_dir = "run-out";
  ModelSpec model;
  TrainConfig train;

  void validate() const {
    if (dataset != "cifar10" && dataset != "mnist") {
      throw ValidationError("dataset must be cifar10 or mnist, got '" + dataset + "'");
    }
    model.validate();
    train.validate();
  }
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& scope) {
  for (const auto& item : j.items()) {
    if (!allowed.contains(item.key())) {
      throw ValidationError("unknown config key '" + scope + item.key() + "'");
    }
  }
}

}  // namespace detail

inline void apply_model_json(ModelSpec& s, const json& j) {
  detail::reject_unknown_keys(j,
                              {"depth", "width", "expansion", "kernel_size", "frozen",
                               "intermediate", "use_lc", "num_classes", "input_channels"},
                              "model.");
  if (j.contains("depth")) s.depth = j.at("depth").get<int64_t>();
  if (j.contains("width")) s.width = j.at("width").get<int64_t>();
  if (j.contains("expansion")) s.expansion = j.at("expansion").get<int64_t>();
  if (j.contains("kernel_size")) s.kernel_size = j.at("kernel_size").get<int64_t>();
  if (j.contains("frozen")) s.frozen_spatial = j.at("frozen").get<bool>();
  if (j.contains("intermediate"))
    s.intermediate = intermediate_from_string(j.at("intermediate").get<std::string>());
  if (j.contains("use_lc")) s.use_lc = j.at("use_lc").get<bool>();
  if (j.contains("num_classes")) s.num_classes = j.at("num_classes").get<int64_t>();
  if (j.contains("input_channels")) s.input_channels = j.at("input_channels").get<int64_t>();
}

inline void apply_train_json(TrainConfig& c, const json& j) {
  detail::reject_unknown_keys(j,
                              {"epochs", "lr0", "momentum", "weight_decay", "batch_size",
                               "label_smoothing", "eval_every", "train_subset",
                               "augment_enabled", "augment"},
                              "train.");
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int64_t>();
  if (j.contains("lr0")) c.lr0 = j.at("lr0").get<double>();
  if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int64_t>();
  if (j.contains("label_smoothing")) c.label_smoothing = j.at("label_smoothing").get<double>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int64_t>();
  if (j.contains("train_subset")) c.train_subset = j.at("train_subset").get<int64_t>();
  if (j.contains("augment_enabled")) c.augment_enabled = j.at("augment_enabled").get<bool>();
  if (j.contains("augment")) {
    detail::reject_unknown_keys(j.at("augment"), {"pad", "crop", "hflip_prob"}, "train.augment.");
    const auto& a = j.at("augment");
    if (a.contains("pad")) c.augment.pad = a.at("pad").get<int64_t>();
    if (a.contains("crop")) c.augment.crop = a.at("crop").get<int64_t>();
    if (a.contains("hflip_prob")) c.augment.hflip_prob = a.at("hflip_prob").get<double>();
  }
}

inline RunConfig parse_run_config(const json& j) {
  detail::reject_unknown_keys(j, {"dataset", "data_dir", "out_dir", "seed", "model", "train"}, "");
  RunConfig cfg;
  if (j.contains("dataset")) cfg.dataset = j.at("dataset").get<std::string>();
  if (j.contains("data_dir")) cfg.data_dir = j.at("data_dir").get<std::string>();
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("seed")) cfg.train.seed = j.at("seed").get<uint64_t>();
  if (j.contains("model")) apply_model_json(cfg.model, j.at("model"));
  if (j.contains("train")) apply_train_json(cfg.train, j.at("train"));
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Command-line values that override the config file. use_lc switches on
/// automatically when expansion or an intermediate op is requested.
struct CliOverrides {
  std::optional<std::string> dataset, data_dir, out_dir;
  std::optional<uint64_t> seed;
  std::optional<int64_t> depth, width, expansion, kernel_size, epochs, batch_size, train_subset;
  std::optional<bool> frozen, use_lc;
  std::optional<std::string> intermediate;

  void apply(RunConfig& cfg) const {
    if (dataset) cfg.dataset = *dataset;
    if (data_dir) cfg.data_dir = *data_dir;
    if (out_dir) cfg.out_dir = *out_dir;
    if (seed) cfg.train.seed = *seed;
    if (depth) cfg.model.depth = *depth;
    if (width) cfg.model.width = *width;
    if (expansion) cfg.model.expansion = *expansion;
    if (kernel_size) cfg.model.kernel_size = *kernel_size;
    if (frozen) cfg.model.frozen_spatial = *frozen;
    if (intermediate) cfg.model.intermediate = intermediate_from_string(*intermediate);
    if (use_lc) cfg.model.use_lc = *use_lc;
    if (epochs) cfg.train.epochs = *epochs;
    if (batch_size) cfg.train.batch_size = *batch_size;
    if (train_subset) cfg.train.train_subset = *train_subset;
    if ((expansion && *expansion > 1) || (intermediate && *intermediate != "none")) {
      if (!use_lc) cfg.model.use_lc = true;
    }
  }
};

inline json to_json(const RunConfig& cfg) {
  return json{{"dataset", cfg.dataset},
              {"data_dir", cfg.data_dir},
              {"out_dir", cfg.out_dir},
              {"seed", cfg.train.seed},
              {"model", to_json(cfg.model)},
              {"train", to_json(cfg.train)}};
}

}  // namespace lcforge
