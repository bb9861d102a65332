#pragma once

#include <optional>
#include <string>

#include "lcforge/common.hpp"
#include "lcforge/gemm.hpp"
#include "lcforge/init.hpp"
#include "lcforge/ops.hpp"
#include "lcforge/rng.hpp"

namespace lcforge {

inline const char* intermediate_name(Intermediate m) {
  switch (m) {
    case Intermediate::kNone: return "none";
    case Intermediate::kReLU: return "relu";
    case Intermediate::kBatchNorm: return "bn";
    case Intermediate::kBatchNormReLU: return "bnrelu";
  }
  return "none";
}

struct LCBlockConfig {
  int64_t c_in = 1;
  int64_t c_out = 1;
  int64_t k = 3;
  int64_t stride = 1;
  int64_t expansion = 1;
  bool frozen_spatial = false;
  Intermediate intermediate = Intermediate::kNone;

  int64_t spatial_filters() const { return c_out * expansion; }
  int64_t padding() const { return (k - 1) / 2; }

  void validate() const {
    if (c_in < 1 || c_out < 1 || k < 1 || stride < 1 || expansion < 1) {
      throw ValidationError("LC block config requires positive c_in, c_out, k, stride, expansion");
    }
  }
};

/// A spatial convolution with c_out*E filters feeding a pointwise
/// convolution back down to c_out, with an optional operation in between.
/// With no intermediate op the pair folds exactly into one spatial conv.
template <typename T>
struct LCBlock {
  LCBlockConfig config;
  ConvWeights<T> spatial;    // (c_out*E) x c_in x k x k
  ConvWeights<T> pointwise;  // c_out x (c_out*E) x 1 x 1
  std::optional<BatchNormState<T>> mid_bn;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, Mode mode) {
    Tensor<T> y = conv2d(tape, x, spatial, config.stride, config.padding());
    switch (config.intermediate) {
      case Intermediate::kNone:
        break;
      case Intermediate::kReLU:
        y = relu(tape, y);
        break;
      case Intermediate::kBatchNorm:
        y = batchnorm2d(tape, y, *mid_bn, mode);
        break;
      case Intermediate::kBatchNormReLU:
        y = batchnorm2d(tape, y, *mid_bn, mode);
        y = relu(tape, y);
        break;
    }
    return pointwise_conv(tape, y, pointwise);
  }

  /// Collapses the pair into the equivalent single convolution:
  /// combined[i] = sum_j pointwise[i,j] * spatial[j].
  ConvWeights<T> fold() const {
    if (config.intermediate != Intermediate::kNone) {
      throw ContractError(std::string("fold undefined under intermediate operation '") +
                          intermediate_name(config.intermediate) + "'");
    }
    const int64_t filters = config.spatial_filters();
    const int64_t kk = config.c_in * config.k * config.k;
    Tensor<T> combined(Shape{config.c_out, config.c_in, config.k, config.k});
    gemm(Trans::kNo, Trans::kNo, config.c_out, kk, filters,
         pointwise.weights.values().data(), filters,
         spatial.weights.values().data(), kk, false,
         combined.values().data(), kk);
    return ConvWeights<T>(std::move(combined), false);
  }

  int64_t param_count() const {
    int64_t n = spatial.weights.numel() + pointwise.weights.numel();
    if (mid_bn) n += mid_bn->gamma.numel() + mid_bn->beta.numel();
    return n;
  }
};

/// Builds an LC block in place of a spatial convolution; both layers use
/// the fan-in uniform init, and the freeze flag applies to the spatial
/// stage only.
template <typename T>
LCBlock<T> wrap_conv_as_lc(int64_t c_in, int64_t c_out, int64_t k, int64_t stride,
                           int64_t expansion, bool frozen, Intermediate intermediate,
                           Rng& rng) {
  LCBlockConfig cfg{c_in, c_out, k, stride, expansion, frozen, intermediate};
  cfg.validate();
  Rng spatial_rng = rng.split(0);
  Rng pointwise_rng = rng.split(1);
  LCBlock<T> block;
  block.config = cfg;
  block.spatial = init_conv<T>(InitSpec{c_in, k}, cfg.spatial_filters(), spatial_rng, frozen);
  block.pointwise = init_conv<T>(InitSpec{cfg.spatial_filters(), 1}, c_out, pointwise_rng, false);
  if (intermediate_has_bn(intermediate)) {
    block.mid_bn.emplace(cfg.spatial_filters());
  }
  return block;
}

}  // namespace lcforge
