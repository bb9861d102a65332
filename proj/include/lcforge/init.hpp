#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "lcforge/common.hpp"
#include "lcforge/ops.hpp"
#include "lcforge/rng.hpp"
#include "lcforge/tensor.hpp"

namespace lcforge {

/// Gain of a uniform fan-in initialization whose std matches leaky-ReLU
/// He init at the framework-default negative slope: sqrt(1/3).
inline double default_init_gain() { return std::sqrt(1.0 / 3.0); }

/// Uniform bound for arbitrary gain: a = sqrt(3) * gain / sqrt(c_in * k^2),
/// so the draw's std is gain / sqrt(fan_in).
inline double uniform_bound_from_gain(int64_t c_in, int64_t k, double gain) {
  if (c_in < 1 || k < 1) {
    throw ValidationError("uniform bound needs c_in >= 1 and k >= 1, got c_in=" +
                          std::to_string(c_in) + ", k=" + std::to_string(k));
  }
  const double fan_in = static_cast<double>(c_in) * static_cast<double>(k) * static_cast<double>(k);
  return std::sqrt(3.0) * gain / std::sqrt(fan_in);
}

/// Default-gain bound: a = 1 / sqrt(c_in * k^2).
inline double kaiming_uniform_bound(int64_t c_in, int64_t k) {
  if (c_in < 1 || k < 1) {
    throw ValidationError("kaiming_uniform_bound needs c_in >= 1 and k >= 1, got c_in=" +
                          std::to_string(c_in) + ", k=" + std::to_string(k));
  }
  const double fan_in = static_cast<double>(c_in) * static_cast<double>(k) * static_cast<double>(k);
  return 1.0 / std::sqrt(fan_in);
}

struct InitSpec {
  int64_t c_in = 1;
  int64_t k = 1;
  double gain = default_init_gain();
  uint64_t seed = 0;

  double bound() const { return uniform_bound_from_gain(c_in, k, gain); }
  double target_std() const { return bound() / std::sqrt(3.0); }
};

/// Draws a c_out x c_in x k x k weight tensor i.i.d. from U[-a, a] in a
/// fixed row-major order.
template <typename T>
ConvWeights<T> init_conv(const InitSpec& spec, int64_t c_out, Rng& rng, bool frozen = false) {
  if (c_out < 1) throw ValidationError("init_conv needs c_out >= 1");
  const double a = spec.bound();
  Tensor<T> w(Shape{c_out, spec.c_in, spec.k, spec.k});
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-a, a));
  return ConvWeights<T>(std::move(w), frozen);
}

/// Fully connected init with the same fan-in rule (k=1 semantics);
/// bias uses the weight bound.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> init_linear(int64_t in_features, int64_t out_features, Rng& rng) {
  if (in_features < 1 || out_features < 1) throw ValidationError("init_linear needs positive sizes");
  const double a = kaiming_uniform_bound(in_features, 1);
  Tensor<T> w(Shape{out_features, in_features});
  Tensor<T> b(Shape{out_features});
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-a, a));
  for (auto& v : b.values()) v = static_cast<T>(rng.uniform(-a, a));
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  return {std::move(w), std::move(b)};
}

}  // namespace lcforge
