#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/init.hpp"
#include "lcforge/lc_block.hpp"
#include "lcforge/ops.hpp"
#include "lcforge/rng.hpp"

namespace lcforge {

/// Architecture descriptor for a CIFAR-style basic-block ResNet and its
/// LC variants (ResNet-LC-{D}-{W}x{E}).
struct ModelSpec {
  int64_t depth = 20;        // counted spatial conv + fully connected layers
  int64_t width = 16;        // channels after the stem
  int64_t expansion = 1;     // spatial filters per output channel in LC blocks
  int64_t kernel_size = 3;   // square kernels, one of {3,5,7,9}
  bool frozen_spatial = false;
  Intermediate intermediate = Intermediate::kNone;
  bool use_lc = false;       // false = plain baseline ResNet-D-W
  int64_t num_classes = 10;
  int64_t input_channels = 3;

  int64_t blocks_per_stage() const { return (depth - 2) / 6; }

  void validate() const {
    if (depth < 8 || depth % 6 != 2) {
      throw ValidationError(
          "model depth must satisfy D = 6n+2, n >= 1 (stem conv + 3 stages of n "
          "basic blocks + linear head), i.e. D congruent 2 (mod 6); got D=" +
          std::to_string(depth));
    }
    if (kernel_size != 3 && kernel_size != 5 && kernel_size != 7 && kernel_size != 9) {
      throw ValidationError("kernel_size must be one of {3,5,7,9}, got " +
                            std::to_string(kernel_size));
    }
    if (width < 1 || expansion < 1 || num_classes < 2 || input_channels < 1) {
      throw ValidationError("model spec requires width >= 1, expansion >= 1, "
                            "num_classes >= 2, input_channels >= 1");
    }
    if (!use_lc && expansion != 1) {
      throw ValidationError("expansion > 1 requires use_lc");
    }
    if (!use_lc && intermediate != Intermediate::kNone) {
      throw ValidationError("an intermediate op requires use_lc");
    }
  }
};

/// One spatial convolution slot: either a plain conv or an LC block.
template <typename T>
struct ConvUnit {
  std::string name;
  int64_t c_in = 0, c_out = 0, k = 0, stride = 1;
  std::optional<LCBlock<T>> lc;
  std::optional<ConvWeights<T>> plain;

  int64_t padding() const { return (k - 1) / 2; }
  bool is_lc() const { return lc.has_value(); }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode) {
    if (lc) return lc->forward(tape, x, mode);
    return conv2d(tape, x, *plain, stride, padding());
  }

  /// The unit's single equivalent spatial filter bank (fold for LC blocks,
  /// the raw weights otherwise).
  ConvWeights<T> combined_weights() const {
    if (lc) return lc->fold();
    return ConvWeights<T>(plain->weights.clone(), false);
  }
};

template <typename T>
struct ParamEntry {
  std::string name;    // unique, stable across save/load
  std::string layer;   // owning unit, used for the census breakdown
  Tensor<T> tensor;    // shares storage with the model
  bool frozen = false;
  bool is_buffer = false;  // running stats: persisted but never trained
};

struct Census {
  struct Layer {
    std::string name;
    std::string kind;  // spatial_conv | projection | batchnorm | linear
    int64_t trainable = 0;
    int64_t frozen = 0;
  };
  int64_t trainable = 0;
  int64_t frozen = 0;
  std::vector<Layer> layers;

  int64_t total() const { return trainable + frozen; }
};

/// CIFAR-style basic-block ResNet: k-stem, three stages at W/2W/4W with
/// stride 2 entering stages 2 and 3, 1x1 projection shortcuts on shape
/// change, global average pool and a linear head. With use_lc every
/// spatial (k>1) convolution, stem included, becomes an LC block;
/// projection shortcuts stay plain and always learnable.
template <typename T>
class ResNetLC {
 public:
  ResNetLC(const ModelSpec& spec, uint64_t seed) : spec_(spec) {
    spec_.validate();
    int64_t ordinal = 0;
    auto next_rng = [&] { return Rng(derive_seed(seed, static_cast<uint64_t>(ordinal++))); };

    const int64_t w = spec_.width;
    stem_ = make_unit("stem", spec_.input_channels, w, 1, next_rng());
    stem_bn_ = std::make_unique<BatchNormState<T>>(w);

    const int64_t n = spec_.blocks_per_stage();
    int64_t c_prev = w;
    for (int64_t stage = 0; stage < 3; ++stage) {
      const int64_t c_stage = w << stage;
      for (int64_t b = 0; b < n; ++b) {
        const int64_t stride = (stage > 0 && b == 0) ? 2 : 1;
        const std::string prefix = "s" + std::to_string(stage + 1) + ".b" + std::to_string(b);
        Block block;
        block.stride = stride;
        block.conv1 = make_unit(prefix + ".conv1", c_prev, c_stage, stride, next_rng());
        block.bn1 = std::make_unique<BatchNormState<T>>(c_stage);
        block.conv2 = make_unit(prefix + ".conv2", c_stage, c_stage, 1, next_rng());
        block.bn2 = std::make_unique<BatchNormState<T>>(c_stage);
        if (stride != 1 || c_prev != c_stage) {
          Rng rng = next_rng();
          block.proj_conv = init_conv<T>(InitSpec{c_prev, 1}, c_stage, rng, /*frozen=*/false);
          block.proj_bn = std::make_unique<BatchNormState<T>>(c_stage);
          block.proj_name = prefix + ".shortcut";
        }
        block.name = prefix;
        blocks_.push_back(std::move(block));
        c_prev = c_stage;
      }
    }

    {
      Rng rng = next_rng();
      auto [hw, hb] = init_linear<T>(4 * w, spec_.num_classes, rng);
      head_w_ = std::move(hw);
      head_b_ = std::move(hb);
    }

    build_registry();
  }

  ResNetLC(const ResNetLC&) = delete;
  ResNetLC& operator=(const ResNetLC&) = delete;
  ResNetLC(ResNetLC&&) = default;
  ResNetLC& operator=(ResNetLC&&) = default;

  const ModelSpec& spec() const { return spec_; }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != spec_.input_channels) {
      throw ValidationError("model expects [N," + std::to_string(spec_.input_channels) +
                            ",H,W] input, got " + shape_str(x.shape()));
    }
    Tensor<T> y = stem_.forward(tape, x, mode);
    y = batchnorm2d(tape, y, *stem_bn_, mode);
    y = relu(tape, y);
    for (auto& block : blocks_) {
      Tensor<T> shortcut = y;
      if (block.proj_conv) {
        shortcut = conv2d(tape, y, *block.proj_conv, block.stride, 0);
        shortcut = batchnorm2d(tape, shortcut, *block.proj_bn, mode);
      }
      Tensor<T> z = block.conv1.forward(tape, y, mode);
      z = batchnorm2d(tape, z, *block.bn1, mode);
      z = relu(tape, z);
      z = block.conv2.forward(tape, z, mode);
      z = batchnorm2d(tape, z, *block.bn2, mode);
      z = add(tape, z, shortcut);
      y = relu(tape, z);
    }
    Tensor<T> pooled = global_avg_pool(tape, y);
    return linear(tape, pooled, head_w_, head_b_);
  }

  std::vector<ParamEntry<T>>& registry() { return registry_; }
  const std::vector<ParamEntry<T>>& registry() const { return registry_; }

  /// Spatial conv units in forward order (stem first). Projection shortcuts
  /// are not spatial units and are excluded.
  std::vector<ConvUnit<T>*> conv_units() {
    std::vector<ConvUnit<T>*> units{&stem_};
    for (auto& b : blocks_) {
      units.push_back(&b.conv1);
      units.push_back(&b.conv2);
    }
    return units;
  }

  Census census() const {
    Census c;
    std::map<std::string, size_t> index;
    for (const auto& e : registry_) {
      if (e.is_buffer) continue;
      auto it = index.find(e.layer);
      if (it == index.end()) {
        index.emplace(e.layer, c.layers.size());
        c.layers.push_back({e.layer, layer_kinds_.at(e.layer), 0, 0});
        it = index.find(e.layer);
      }
      auto& row = c.layers[it->second];
      (e.frozen ? row.frozen : row.trainable) += e.tensor.numel();
      (e.frozen ? c.frozen : c.trainable) += e.tensor.numel();
    }
    return c;
  }

 private:
  struct Block {
    std::string name;
    int64_t stride = 1;
    ConvUnit<T> conv1, conv2;
    std::unique_ptr<BatchNormState<T>> bn1, bn2;
    std::optional<ConvWeights<T>> proj_conv;
    std::unique_ptr<BatchNormState<T>> proj_bn;
    std::string proj_name;
  };

  ConvUnit<T> make_unit(const std::string& name, int64_t c_in, int64_t c_out,
                        int64_t stride, Rng rng) {
    ConvUnit<T> unit;
    unit.name = name;
    unit.c_in = c_in;
    unit.c_out = c_out;
    unit.k = spec_.kernel_size;
    unit.stride = stride;
    if (spec_.use_lc) {
      unit.lc = wrap_conv_as_lc<T>(c_in, c_out, spec_.kernel_size, stride, spec_.expansion,
                                   spec_.frozen_spatial, spec_.intermediate, rng);
    } else {
      unit.plain = init_conv<T>(InitSpec{c_in, spec_.kernel_size}, c_out, rng,
                                spec_.frozen_spatial);
    }
    return unit;
  }

  void add_param(const std::string& layer, const std::string& kind, const std::string& name,
                 Tensor<T> t, bool frozen, bool is_buffer = false) {
    layer_kinds_.emplace(layer, kind);
    registry_.push_back(ParamEntry<T>{name, layer, std::move(t), frozen, is_buffer});
  }

  void add_bn(const std::string& layer, const std::string& kind, BatchNormState<T>& bn) {
    add_param(layer, kind, layer + ".gamma", bn.gamma, false);
    add_param(layer, kind, layer + ".beta", bn.beta, false);
    add_param(layer, kind, layer + ".running_mean", bn.running_mean, false, true);
    add_param(layer, kind, layer + ".running_var", bn.running_var, false, true);
  }

  void add_unit(ConvUnit<T>& unit) {
    const std::string& layer = unit.name;
    if (unit.is_lc()) {
      add_param(layer, "spatial_conv", layer + ".spatial", unit.lc->spatial.weights,
                unit.lc->spatial.frozen);
      add_param(layer, "spatial_conv", layer + ".pointwise", unit.lc->pointwise.weights,
                unit.lc->pointwise.frozen);
      if (unit.lc->mid_bn) {
        add_param(layer, "spatial_conv", layer + ".mid_bn.gamma", unit.lc->mid_bn->gamma, false);
        add_param(layer, "spatial_conv", layer + ".mid_bn.beta", unit.lc->mid_bn->beta, false);
        add_param(layer, "spatial_conv", layer + ".mid_bn.running_mean",
                  unit.lc->mid_bn->running_mean, false, true);
        add_param(layer, "spatial_conv", layer + ".mid_bn.running_var",
                  unit.lc->mid_bn->running_var, false, true);
      }
    } else {
      add_param(layer, "spatial_conv", layer + ".weight", unit.plain->weights,
                unit.plain->frozen);
    }
  }

  void build_registry() {
    add_unit(stem_);
    add_bn("stem_bn", "batchnorm", *stem_bn_);
    for (auto& b : blocks_) {
      add_unit(b.conv1);
      add_bn(b.name + ".bn1", "batchnorm", *b.bn1);
      add_unit(b.conv2);
      add_bn(b.name + ".bn2", "batchnorm", *b.bn2);
      if (b.proj_conv) {
        add_param(b.proj_name, "projection", b.proj_name + ".weight", b.proj_conv->weights, false);
        add_bn(b.proj_name + ".bn", "projection", *b.proj_bn);
      }
    }
    add_param("head", "linear", "head.weight", head_w_, false);
    add_param("head", "linear", "head.bias", head_b_, false);
  }

  ModelSpec spec_;
  ConvUnit<T> stem_;
  std::unique_ptr<BatchNormState<T>> stem_bn_;
  std::vector<Block> blocks_;
  Tensor<T> head_w_, head_b_;
  std::vector<ParamEntry<T>> registry_;
  std::map<std::string, std::string> layer_kinds_;
};

template <typename T>
ResNetLC<T> build_resnet_lc(const ModelSpec& spec, uint64_t seed) {
  return ResNetLC<T>(spec, seed);
}

/// Rebuilds an LC model as the plain baseline carrying the folded combined
/// filters; every non-conv parameter (batch norms, shortcuts, head) is
/// copied verbatim, so the two models agree up to conv summation order.
template <typename T>
ResNetLC<T> fold_model(ResNetLC<T>& model) {
  const ModelSpec& src_spec = model.spec();
  if (!src_spec.use_lc) {
    throw ContractError("nothing to fold: model has no LC blocks");
  }
  ModelSpec folded_spec = src_spec;
  folded_spec.use_lc = false;
  folded_spec.expansion = 1;
  folded_spec.frozen_spatial = false;
  folded_spec.intermediate = Intermediate::kNone;

  ResNetLC<T> folded(folded_spec, 0);
  std::map<std::string, Tensor<T>> dst;
  for (auto& e : folded.registry()) dst.emplace(e.name, e.tensor);

  for (auto* unit : model.conv_units()) {
    auto combined = unit->combined_weights();  // throws for intermediate ops
    auto target = dst.at(unit->name + ".weight");
    std::copy(combined.weights.values().begin(), combined.weights.values().end(),
              target.values().begin());
  }
  for (const auto& e : model.registry()) {
    if (e.name.ends_with(".spatial") || e.name.ends_with(".pointwise")) continue;
    auto it = dst.find(e.name);
    if (it == dst.end()) continue;  // LC-only state (mid-bn) has no folded counterpart
    std::copy(e.tensor.values().begin(), e.tensor.values().end(), it->second.values().begin());
  }
  return folded;
}

}  // namespace lcforge
