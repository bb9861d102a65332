#pragma once

// JSON (de)serialization for specs, configs and histories. Kept out of the
// core headers so only checkpoint/config/CLI code pays for json.hpp.

#include <string>

#include <json.hpp>

#include "lcforge/common.hpp"
#include "lcforge/data.hpp"
#include "lcforge/lc_block.hpp"
#include "lcforge/model.hpp"
#include "lcforge/trainer.hpp"

namespace lcforge {

using json = nlohmann::json;

inline Intermediate intermediate_from_string(const std::string& s) {
  if (s == "none") return Intermediate::kNone;
  if (s == "relu") return Intermediate::kReLU;
  if (s == "bn") return Intermediate::kBatchNorm;
  if (s == "bnrelu") return Intermediate::kBatchNormReLU;
  throw ValidationError("unknown intermediate op '" + s + "' (expected none|relu|bn|bnrelu)");
}

inline json to_json(const ModelSpec& s) {
  return json{{"depth", s.depth},
              {"width", s.width},
              {"expansion", s.expansion},
              {"kernel_size", s.kernel_size},
              {"frozen", s.frozen_spatial},
              {"intermediate", intermediate_name(s.intermediate)},
              {"use_lc", s.use_lc},
              {"num_classes", s.num_classes},
              {"input_channels", s.input_channels}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.depth = j.at("depth").get<int64_t>();
  s.width = j.at("width").get<int64_t>();
  s.expansion = j.at("expansion").get<int64_t>();
  s.kernel_size = j.at("kernel_size").get<int64_t>();
  s.frozen_spatial = j.at("frozen").get<bool>();
  s.intermediate = intermediate_from_string(j.at("intermediate").get<std::string>());
  s.use_lc = j.at("use_lc").get<bool>();
  s.num_classes = j.at("num_classes").get<int64_t>();
  s.input_channels = j.at("input_channels").get<int64_t>();
  return s;
}

inline json to_json(const AugmentPolicy& p) {
  return json{{"pad", p.pad}, {"crop", p.crop}, {"hflip_prob", p.hflip_prob}};
}

inline AugmentPolicy augment_from_json(const json& j) {
  AugmentPolicy p;
  p.pad = j.at("pad").get<int64_t>();
  p.crop = j.at("crop").get<int64_t>();
  p.hflip_prob = j.at("hflip_prob").get<double>();
  return p;
}

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"lr0", c.lr0},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"label_smoothing", c.label_smoothing},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"train_subset", c.train_subset},
              {"augment_enabled", c.augment_enabled},
              {"augment", to_json(c.augment)}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int64_t>();
  c.lr0 = j.at("lr0").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.eval_every = j.at("eval_every").get<int64_t>();
  c.train_subset = j.at("train_subset").get<int64_t>();
  c.augment_enabled = j.at("augment_enabled").get<bool>();
  c.augment = augment_from_json(j.at("augment"));
  return c;
}

inline json to_json(const History& h) {
  json arr = json::array();
  for (const auto& r : h) {
    arr.push_back(json{{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"val_acc", r.val_acc},
                       {"lr", r.lr}});
  }
  return arr;
}

inline History history_from_json(const json& j) {
  History h;
  for (const auto& e : j) {
    h.push_back(EpochRecord{e.at("epoch").get<int64_t>(), e.at("train_loss").get<double>(),
                            e.at("val_acc").get<double>(), e.at("lr").get<double>()});
  }
  return h;
}

}  // namespace lcforge
