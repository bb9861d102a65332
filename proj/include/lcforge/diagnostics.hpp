#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/data.hpp"
#include "lcforge/init.hpp"
#include "lcforge/model.hpp"
#include "lcforge/trainer.hpp"

namespace lcforge {

/// All kernels of one layer, one k x k slice per (out, in) pair, plus the
/// std of the whole weight tensor for normalization.
struct KernelStack {
  int64_t count = 0;
  int64_t k = 0;
  std::vector<double> kernels;  // count * k * k
  double layer_std = 0;
};

template <typename T>
KernelStack make_kernel_stack(const ConvWeights<T>& w) {
  KernelStack stack;
  stack.count = w.c_out() * w.c_in();
  stack.k = w.k();
  stack.kernels.assign(w.weights.values().begin(), w.weights.values().end());
  double mu = 0;
  for (double v : stack.kernels) mu += v;
  mu /= static_cast<double>(stack.kernels.size());
  double var = 0;
  for (double v : stack.kernels) var += (v - mu) * (v - mu);
  stack.layer_std = std::sqrt(var / static_cast<double>(stack.kernels.size()));
  return stack;
}

/// Diversity of kernel patterns: flatten each kernel, center every column
/// of the count x k^2 matrix, take singular values, and return the Shannon
/// entropy of the explained-variance ratios. ln(k^2) when all directions
/// contribute equally, 0 for a single repeated pattern.
inline double variance_entropy(const KernelStack& stack) {
  if (stack.count < 2) {
    throw ValidationError("variance_entropy needs at least 2 kernels, got " +
                          std::to_string(stack.count));
  }
  const int64_t n = stack.count, d = stack.k * stack.k;
  Eigen::MatrixXd a(n, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) a(i, j) = stack.kernels[static_cast<size_t>(i * d + j)];
  a.rowwise() -= a.colwise().mean();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  const auto& sv = svd.singularValues();
  double total = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) total += sv[i] * sv[i];
  if (total <= 0) return 0.0;  // all kernels identical
  double entropy = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    const double p = sv[i] * sv[i] / total;
    if (p > 0) entropy -= p * std::log(p);
  }
  return entropy;
}

/// Monte-Carlo estimate of the expected variance entropy of n i.i.d.
/// fan-in-uniform k x k kernels; freshly initialized layers score about 1
/// after dividing by it. The metric is scale-invariant, so the bound's
/// channel fan does not matter.
inline double randomness_threshold(int64_t n, int64_t k, int64_t draws, Rng& rng) {
  if (draws < 30) throw ValidationError("randomness_threshold needs at least 30 draws");
  if (n < 2 || k < 1) throw ValidationError("randomness_threshold needs n >= 2, k >= 1");
  const double bound = kaiming_uniform_bound(1, k);
  KernelStack stack;
  stack.count = n;
  stack.k = k;
  stack.kernels.resize(static_cast<size_t>(n * k * k));
  double acc = 0;
  for (int64_t d = 0; d < draws; ++d) {
    for (auto& v : stack.kernels) v = rng.uniform(-bound, bound);
    acc += variance_entropy(stack);
  }
  return acc / static_cast<double>(draws);
}

/// Per-position variance over all kernels, each kernel first divided by the
/// layer std. Uniform for i.i.d. random filters; centered for learned large
/// kernels.
inline std::vector<double> spatial_variance_heatmap(const KernelStack& stack) {
  if (stack.count < 2) throw ValidationError("heatmap needs at least 2 kernels");
  if (stack.layer_std <= 0) throw ValidationError("heatmap undefined for zero layer std");
  const int64_t n = stack.count, d = stack.k * stack.k;
  std::vector<double> heat(static_cast<size_t>(d));
  for (int64_t j = 0; j < d; ++j) {
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += stack.kernels[static_cast<size_t>(i * d + j)] / stack.layer_std;
    mu /= static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double v = stack.kernels[static_cast<size_t>(i * d + j)] / stack.layer_std - mu;
      var += v * v;
    }
    heat[static_cast<size_t>(j)] = var / static_cast<double>(n);
  }
  return heat;
}

namespace detail {

inline void write_pgm(const std::string& path, int64_t height, int64_t width,
                      const std::vector<uint8_t>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out.flush()) throw Error("failed flushing " + path);
}

// Min-max to [0,255]; a constant block maps to mid-gray 128.
inline uint8_t quantize(double v, double lo, double hi) {
  if (hi <= lo) return 128;
  return static_cast<uint8_t>(std::lround((v - lo) / (hi - lo) * 255.0));
}

}  // namespace detail

/// Tiles all kernels into a ceil(sqrt(N))-column grid with 1-pixel black
/// separators, each kernel min-max normalized, written as binary PGM (P5).
inline void export_filter_grid(const KernelStack& stack, const std::string& path) {
  const int64_t n = stack.count, k = stack.k;
  const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int64_t rows = (n + cols - 1) / cols;
  const int64_t width = cols * k + (cols - 1);
  const int64_t height = rows * k + (rows - 1);
  std::vector<uint8_t> img(static_cast<size_t>(width * height), 0);
  for (int64_t i = 0; i < n; ++i) {
    const double* kern = stack.kernels.data() + i * k * k;
    double lo = kern[0], hi = kern[0];
    for (int64_t j = 1; j < k * k; ++j) {
      lo = std::min(lo, kern[j]);
      hi = std::max(hi, kern[j]);
    }
    const int64_t gy = (i / cols) * (k + 1);
    const int64_t gx = (i % cols) * (k + 1);
    for (int64_t y = 0; y < k; ++y)
      for (int64_t x = 0; x < k; ++x)
        img[static_cast<size_t>((gy + y) * width + gx + x)] =
            detail::quantize(kern[y * k + x], lo, hi);
  }
  detail::write_pgm(path, height, width, img);
}

/// k x k map rendered as one PGM image, min-max normalized over the map.
inline void export_heatmap_pgm(const std::vector<double>& heat, int64_t k,
                               const std::string& path) {
  double lo = heat[0], hi = heat[0];
  for (double v : heat) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<uint8_t> img(heat.size());
  for (size_t i = 0; i < heat.size(); ++i) img[i] = detail::quantize(heat[i], lo, hi);
  detail::write_pgm(path, k, k, img);
}

struct AttackConfig {
  double epsilon = 1.0 / 255.0;  // l_inf budget in 1/255 pixel steps
  double label_smoothing = 0.1;  // matches the training loss
};

/// Single-step sign attack in the integer pixel domain. epsilon converts to
/// whole 1/255 steps, so the pixel-space l_inf bound is exact and epsilon=0
/// returns the input bit-for-bit. forward_fn must run the network in eval
/// mode; x must be in normalized space with the given per-channel stats.
template <typename T>
Tensor<T> fgsm_attack_fn(const std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>& forward_fn,
                         const Tensor<T>& x, std::span<const int32_t> y, const AttackConfig& cfg,
                         std::span<const double> channel_mean,
                         std::span<const double> channel_std) {
  if (cfg.epsilon < 0) throw ValidationError("attack epsilon must be >= 0");
  const int64_t steps = static_cast<int64_t>(std::llround(cfg.epsilon * 255.0));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (channel_mean.size() != static_cast<size_t>(c) || channel_std.size() != static_cast<size_t>(c)) {
    throw ValidationError("attack needs per-channel stats matching the input");
  }

  Tensor<T> probe = x.clone();
  probe.set_requires_grad(true);
  Tape<T> tape;
  auto logits = forward_fn(tape, probe);
  auto loss = softmax_cross_entropy(tape, logits, y, cfg.label_smoothing);
  tape.backward(loss);
  auto grad = probe.grad();

  Tensor<T> out(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const double mean = channel_mean[static_cast<size_t>(ch)];
      const double sd = channel_std[static_cast<size_t>(ch)];
      const int64_t base = (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) {
        const int64_t px = std::llround(denormalize_pixel(xv[static_cast<size_t>(base + j)], mean, sd));
        const T g = grad[static_cast<size_t>(base + j)];
        const int64_t sign = (g > T(0)) - (g < T(0));
        const int64_t adv = std::clamp<int64_t>(px + steps * sign, 0, 255);
        if (std::abs(adv - px) > steps) {
          throw Error("fgsm perturbation exceeded its budget");  // hard l_inf assertion
        }
        ov[static_cast<size_t>(base + j)] =
            normalize_pixel<T>(static_cast<uint8_t>(adv), mean, sd);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> fgsm_attack(ResNetLC<T>& model, const Tensor<T>& x, std::span<const int32_t> y,
                      const AttackConfig& cfg, std::span<const double> channel_mean,
                      std::span<const double> channel_std) {
  return fgsm_attack_fn<T>(
      [&model](Tape<T>& tape, const Tensor<T>& input) {
        return model.forward(tape, input, Mode::kEval);
      },
      x, y, cfg, channel_mean, channel_std);
}

/// Accuracy on the attack-perturbed dataset; equals clean accuracy exactly
/// at epsilon=0.
template <typename T>
double robust_accuracy(ResNetLC<T>& model, const Dataset& ds, int64_t batch_size,
                       const AttackConfig& cfg) {
  Batcher<T> batcher(ds, batch_size, 0, /*training=*/false);
  batcher.begin_epoch(0);
  int64_t correct = 0;
  while (auto batch = batcher.next()) {
    auto adv = fgsm_attack(model, batch->x, std::span<const int32_t>(batch->labels), cfg,
                           ds.channel_mean, ds.channel_std);
    Tape<T> tape(false);
    auto logits = model.forward(tape, adv, Mode::kEval);
    const int64_t bn = logits.dim(0), bc = logits.dim(1);
    for (int64_t i = 0; i < bn; ++i) {
      const int32_t pred = argmax_row(logits.values().data() + i * bc, bc);
      correct += (pred == batch->labels[static_cast<size_t>(i)]);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.count);
}

}  // namespace lcforge
