#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/gemm.hpp"
#include "lcforge/parallel.hpp"
#include "lcforge/tape.hpp"
#include "lcforge/tensor.hpp"

namespace lcforge {

/// 4-d convolution weights [c_out, c_in, k, k]. Frozen weights are excluded
/// from gradient computation and from optimizer updates.
template <typename T>
struct ConvWeights {
  Tensor<T> weights;
  bool frozen = false;

  ConvWeights() = default;
  ConvWeights(Tensor<T> w, bool frz) : weights(std::move(w)), frozen(frz) {
    if (weights.rank() != 4) {
      throw ValidationError("conv weights must be 4-d, got " + shape_str(weights.shape()));
    }
    if (weights.dim(2) != weights.dim(3)) {
      throw ValidationError("conv kernels must be square, got " + shape_str(weights.shape()));
    }
    weights.set_requires_grad(!frozen);
  }

  int64_t c_out() const { return weights.dim(0); }
  int64_t c_in() const { return weights.dim(1); }
  int64_t k() const { return weights.dim(2); }

  void set_frozen(bool frz) {
    frozen = frz;
    weights.set_requires_grad(!frz);
  }
};

namespace detail {

template <typename T>
bool taped_grad(const Tape<T>& tape, bool any_input_needs) {
  return tape.recording() && any_input_needs;
}

template <typename T>
void finish_output(Tensor<T>& out, bool needs_grad, const char* op) {
  if (needs_grad) {
    out.set_requires_grad(true);
    out.mark_on_tape();
  }
  debug_check_finite<T>(out.values(), op);
}

// Unrolls one image [C,H,W] into the patch matrix [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t k,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* col) {
  const int64_t patch = ho * wo;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ch * k + ki) * k + kj) * patch;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ch * h + iy) * w;
          if (stride == 1) {
            const int64_t ix0 = kj - pad;
            const int64_t lo = std::clamp<int64_t>(-ix0, 0, wo);       // first in-range ox
            const int64_t hi = std::clamp<int64_t>(w - ix0, lo, wo);   // one past last
            if (lo > 0) std::fill(dst, dst + lo, T(0));
            if (hi > lo) std::memcpy(dst + lo, src + ix0 + lo, static_cast<size_t>(hi - lo) * sizeof(T));
            if (hi < wo) std::fill(dst + hi, dst + wo, T(0));
          } else {
            for (int64_t ox = 0; ox < wo; ++ox) {
              const int64_t ix = ox * stride + kj - pad;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-adds a patch matrix back onto one image gradient.
template <typename T>
void col2im_add(const T* col, int64_t c, int64_t h, int64_t w, int64_t k,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* xg) {
  const int64_t patch = ho * wo;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ch * k + ki) * k + kj) * patch;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = xg + (ch * h + iy) * w;
          const T* src = row + oy * wo;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-d cross-correlation (no kernel flip, no bias), zero padding.
/// Output channel i is sum_j w[i,j] (*) x[:,j].
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const ConvWeights<T>& w,
                 int64_t stride, int64_t padding) {
  if (x.rank() != 4) throw ValidationError("conv2d input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (stride < 1) throw ValidationError("conv2d stride must be positive");
  if (padding < 0) throw ValidationError("conv2d padding must be non-negative");
  const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), win = x.dim(3);
  const int64_t c_out = w.c_out(), k = w.k();
  if (c_in != w.c_in()) {
    throw ValidationError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                          " vs weights " + shape_str(w.weights.shape()));
  }
  const int64_t ho = (h + 2 * padding - k) / stride + 1;
  const int64_t wo = (win + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || win + 2 * padding < k || ho < 1 || wo < 1) {
    throw ValidationError("conv2d produces non-positive output size for input " +
                          shape_str(x.shape()) + ", k=" + std::to_string(k) +
                          ", stride=" + std::to_string(stride) + ", padding=" + std::to_string(padding));
  }

  Tensor<T> out = Tensor<T>::uninitialized(Shape{n, c_out, ho, wo});
  const int64_t kdim = c_in * k * k;
  const int64_t patch = ho * wo;
  const T* xv = x.values().data();
  const T* wv = w.weights.values().data();
  T* ov = out.values().data();

  parallel::run(n, [&](int64_t lo, int64_t hi) {
    std::vector<T> col(static_cast<size_t>(kdim * patch));
    for (int64_t i = lo; i < hi; ++i) {
      detail::im2col(xv + i * c_in * h * win, c_in, h, win, k, stride, padding, ho, wo, col.data());
      gemm(Trans::kNo, Trans::kNo, c_out, patch, kdim, wv, kdim, col.data(), patch,
           false, ov + i * c_out * patch, patch);
    }
  });

  const bool x_needs = x.requires_grad();
  const bool w_needs = w.weights.requires_grad();  // skipped when frozen
  const bool needs = detail::taped_grad(tape, x_needs || w_needs);
  detail::finish_output(out, needs, "conv2d");
  if (needs) {
    auto xt = x, wt = w.weights, ot = out;
    tape.record([xt, wt, ot, stride, padding, n, c_in, h, win, c_out, k, ho, wo]() mutable {
      if (!ot.has_grad()) return;
      const int64_t kdim = c_in * k * k;
      const int64_t patch = ho * wo;
      const T* gv = ot.grad().data();
      const T* wv = wt.values().data();
      const T* xv = xt.values().data();

      if (xt.requires_grad()) {
        xt.ensure_grad();
        T* xg = xt.grad().data();
        parallel::run(n, [&](int64_t lo, int64_t hi) {
          std::vector<T> dcol(static_cast<size_t>(kdim * patch));
          for (int64_t i = lo; i < hi; ++i) {
            gemm(Trans::kYes, Trans::kNo, kdim, patch, c_out, wv, kdim,
                 gv + i * c_out * patch, patch, false, dcol.data(), patch);
            detail::col2im_add(dcol.data(), c_in, h, win, k, stride, padding, ho, wo,
                               xg + i * c_in * h * win);
          }
        });
      }
      if (wt.requires_grad()) {
        wt.ensure_grad();
        const int64_t chunks = parallel::reduce_chunks(n);
        std::vector<std::vector<T>> partials(static_cast<size_t>(chunks));
        parallel::run(chunks, [&](int64_t lo, int64_t hi) {
          std::vector<T> col(static_cast<size_t>(kdim * patch));
          for (int64_t ci = lo; ci < hi; ++ci) {
            auto& part = partials[static_cast<size_t>(ci)];
            part.assign(static_cast<size_t>(c_out * kdim), T(0));
            const int64_t n_lo = ci * parallel::kReduceChunk;
            const int64_t n_hi = std::min(n, n_lo + parallel::kReduceChunk);
            for (int64_t i = n_lo; i < n_hi; ++i) {
              detail::im2col(xv + i * c_in * h * win, c_in, h, win, k, stride, padding, ho, wo, col.data());
              gemm(Trans::kNo, Trans::kYes, c_out, kdim, patch, gv + i * c_out * patch,
                   patch, col.data(), patch, true, part.data(), kdim);
            }
          }
        });
        T* wg = wt.grad().data();
        const int64_t wn = c_out * kdim;
        for (const auto& part : partials) {
          for (int64_t j = 0; j < wn; ++j) wg[j] += part[static_cast<size_t>(j)];
        }
      }
    });
  }
  return out;
}

/// 1x1 convolution: per-pixel linear combination of input channels.
template <typename T>
Tensor<T> pointwise_conv(Tape<T>& tape, const Tensor<T>& x, const ConvWeights<T>& w) {
  if (w.k() != 1) {
    throw ValidationError("pointwise_conv requires k=1 weights, got " + shape_str(w.weights.shape()));
  }
  if (x.rank() != 4) throw ValidationError("pointwise_conv input must be [N,C,H,W]");
  const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), win = x.dim(3);
  if (c_in != w.c_in()) {
    throw ValidationError("pointwise_conv channel mismatch: input " + shape_str(x.shape()) +
                          " vs weights " + shape_str(w.weights.shape()));
  }
  const int64_t c_out = w.c_out();
  const int64_t patch = h * win;

  Tensor<T> out = Tensor<T>::uninitialized(Shape{n, c_out, h, win});
  const T* xv = x.values().data();
  const T* wv = w.weights.values().data();
  T* ov = out.values().data();
  parallel::run(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      gemm(Trans::kNo, Trans::kNo, c_out, patch, c_in, wv, c_in,
           xv + i * c_in * patch, patch, false, ov + i * c_out * patch, patch);
    }
  });

  const bool needs = detail::taped_grad(tape, x.requires_grad() || w.weights.requires_grad());
  detail::finish_output(out, needs, "pointwise_conv");
  if (needs) {
    auto xt = x, wt = w.weights, ot = out;
    tape.record([xt, wt, ot, n, c_in, c_out, patch]() mutable {
      if (!ot.has_grad()) return;
      const T* gv = ot.grad().data();
      if (xt.requires_grad()) {
        xt.ensure_grad();
        T* xg = xt.grad().data();
        const T* wv = wt.values().data();
        parallel::run(n, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) {
            gemm(Trans::kYes, Trans::kNo, c_in, patch, c_out, wv, c_in,
                 gv + i * c_out * patch, patch, true, xg + i * c_in * patch, patch);
          }
        });
      }
      if (wt.requires_grad()) {
        wt.ensure_grad();
        const T* xv = xt.values().data();
        const int64_t chunks = parallel::reduce_chunks(n);
        std::vector<std::vector<T>> partials(static_cast<size_t>(chunks));
        parallel::run(chunks, [&](int64_t lo, int64_t hi) {
          for (int64_t ci = lo; ci < hi; ++ci) {
            auto& part = partials[static_cast<size_t>(ci)];
            part.assign(static_cast<size_t>(c_out * c_in), T(0));
            const int64_t n_lo = ci * parallel::kReduceChunk;
            const int64_t n_hi = std::min(n, n_lo + parallel::kReduceChunk);
            for (int64_t i = n_lo; i < n_hi; ++i) {
              gemm(Trans::kNo, Trans::kYes, c_out, c_in, patch, gv + i * c_out * patch,
                   patch, xv + i * c_in * patch, patch, true, part.data(), c_in);
            }
          }
        });
        T* wg = wt.grad().data();
        const int64_t wn = c_out * c_in;
        for (const auto& part : partials) {
          for (int64_t j = 0; j < wn; ++j) wg[j] += part[static_cast<size_t>(j)];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  parallel::run(static_cast<int64_t>(xv.size()), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  });

  const bool needs = detail::taped_grad(tape, x.requires_grad());
  detail::finish_output(out, needs, "relu");
  if (needs) {
    auto xt = x, ot = out;
    tape.record([xt, ot]() mutable {
      if (!ot.has_grad() || !xt.requires_grad()) return;
      xt.ensure_grad();
      auto g = ot.grad();
      auto o = ot.values();
      auto xg = xt.grad();
      // subgradient at 0 is 0; out > 0 iff x > 0
      parallel::run(static_cast<int64_t>(g.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
          if (o[i] > T(0)) xg[i] += g[i];
        }
      });
    });
  }
  return out;
}

/// Elementwise sum of two same-shape tensors (residual connections).
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  parallel::run(static_cast<int64_t>(av.size()), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] + bv[i];
  });

  const bool needs = detail::taped_grad(tape, a.requires_grad() || b.requires_grad());
  detail::finish_output(out, needs, "add");
  if (needs) {
    auto at = a, bt = b, ot = out;
    tape.record([at, bt, ot]() mutable {
      if (!ot.has_grad()) return;
      auto g = ot.grad();
      for (auto* t : {&at, &bt}) {
        if (!t->requires_grad()) continue;
        t->ensure_grad();
        auto tg = t->grad();
        parallel::run(static_cast<int64_t>(g.size()), [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) tg[i] += g[i];
        });
      }
    });
  }
  return out;
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 4) throw ValidationError("global_avg_pool input must be [N,C,H,W]");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::uninitialized(Shape{n, c});
  const T* xv = x.values().data();
  T* ov = out.values().data();
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0;
    const T* src = xv + i * hw;
    for (int64_t j = 0; j < hw; ++j) acc += static_cast<double>(src[j]);
    ov[i] = static_cast<T>(acc / static_cast<double>(hw));
  }

  const bool needs = detail::taped_grad(tape, x.requires_grad());
  detail::finish_output(out, needs, "global_avg_pool");
  if (needs) {
    auto xt = x, ot = out;
    tape.record([xt, ot, n, c, hw]() mutable {
      if (!ot.has_grad() || !xt.requires_grad()) return;
      xt.ensure_grad();
      const T* g = ot.grad().data();
      T* xg = xt.grad().data();
      const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
      for (int64_t i = 0; i < n * c; ++i) {
        const T v = g[i] * inv;
        T* dst = xg + i * hw;
        for (int64_t j = 0; j < hw; ++j) dst[j] += v;
      }
    });
  }
  return out;
}

/// Fully connected head: y = x w^T + b with x [N,F], w [C,F], b [C].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ValidationError("linear expects x [N,F], w [C,F], b [C]");
  }
  const int64_t n = x.dim(0), f = x.dim(1), c = w.dim(0);
  if (w.dim(1) != f || b.dim(0) != c) {
    throw ValidationError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " +
                          shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  Tensor<T> out = Tensor<T>::uninitialized(Shape{n, c});
  gemm(Trans::kNo, Trans::kYes, n, c, f, x.values().data(), f, w.values().data(), f,
       false, out.values().data(), c);
  {
    T* ov = out.values().data();
    const T* bv = b.values().data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) ov[i * c + j] += bv[j];
  }

  const bool needs = detail::taped_grad(
      tape, x.requires_grad() || w.requires_grad() || b.requires_grad());
  detail::finish_output(out, needs, "linear");
  if (needs) {
    auto xt = x, wt = w, bt = b, ot = out;
    tape.record([xt, wt, bt, ot, n, f, c]() mutable {
      if (!ot.has_grad()) return;
      const T* g = ot.grad().data();
      if (xt.requires_grad()) {
        xt.ensure_grad();
        gemm(Trans::kNo, Trans::kNo, n, f, c, g, c, wt.values().data(), f, true,
             xt.grad().data(), f);
      }
      if (wt.requires_grad()) {
        wt.ensure_grad();
        gemm(Trans::kYes, Trans::kNo, c, f, n, g, c, xt.values().data(), f, true,
             wt.grad().data(), f);
      }
      if (bt.requires_grad()) {
        bt.ensure_grad();
        T* bg = bt.grad().data();
        for (int64_t j = 0; j < c; ++j) {
          double acc = 0;
          for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(g[i * c + j]);
          bg[j] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

/// Per-channel batch normalization state (affine + running statistics).
template <typename T>
struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;  // buffers, never differentiated

  explicit BatchNormState(int64_t channels)
      : gamma(Tensor<T>::full(Shape{channels}, T(1))),
        beta(Shape{channels}),
        running_mean(Shape{channels}),
        running_var(Tensor<T>::full(Shape{channels}, T(1))) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  int64_t channels() const { return gamma.dim(0); }
};

/// Batch normalization over [N,C,H,W]. Train mode normalizes by batch
/// statistics (biased variance) and updates running stats (unbiased);
/// eval mode normalizes by running stats. Affine transform always applied.
template <typename T>
Tensor<T> batchnorm2d(Tape<T>& tape, const Tensor<T>& x, BatchNormState<T>& state,
                      Mode mode, double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) throw ValidationError("batchnorm2d input must be [N,C,H,W]");
  if (eps <= 0) throw ValidationError("batchnorm2d eps must be positive");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (state.channels() != c) {
    throw ValidationError("batchnorm2d channel mismatch: input " + shape_str(x.shape()) +
                          " vs " + std::to_string(state.channels()) + " affine params");
  }
  const int64_t hw = h * w;
  const int64_t m = n * hw;  // samples per channel

  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  std::vector<T> mean_v(static_cast<size_t>(c)), invstd_v(static_cast<size_t>(c));
  const T* xv = x.values().data();
  T* ov = out.values().data();
  const T* gammav = state.gamma.values().data();
  const T* betav = state.beta.values().data();

  if (mode == Mode::kTrain) {
    if (m <= 1) {
      throw ValidationError("batchnorm2d train mode needs more than one value per channel, got " +
                            std::to_string(m));
    }
    T* rm = state.running_mean.values().data();
    T* rv = state.running_var.values().data();
    parallel::run(c, [&](int64_t lo, int64_t hi) {
      for (int64_t ch = lo; ch < hi; ++ch) {
        double sum = 0, sum_sq = 0;  // one pass; double keeps the cancellation harmless
        for (int64_t i = 0; i < n; ++i) {
          const T* src = xv + (i * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) {
            const double v = static_cast<double>(src[j]);
            sum += v;
            sum_sq += v * v;
          }
        }
        const double mu = sum / static_cast<double>(m);
        const double var = std::max(0.0, sum_sq / static_cast<double>(m) - mu * mu);
        const double invstd = 1.0 / std::sqrt(var + eps);
        mean_v[static_cast<size_t>(ch)] = static_cast<T>(mu);
        invstd_v[static_cast<size_t>(ch)] = static_cast<T>(invstd);
        const T g = gammav[ch], bta = betav[ch];
        const T muT = static_cast<T>(mu), isT = static_cast<T>(invstd);
        for (int64_t i = 0; i < n; ++i) {
          const T* src = xv + (i * c + ch) * hw;
          T* dst = ov + (i * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - muT) * isT * g + bta;
        }
        const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
        rm[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(rm[ch]) + momentum * mu);
        rv[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(rv[ch]) + momentum * unbiased);
      }
    });
  } else {
    const T* rm = state.running_mean.values().data();
    const T* rv = state.running_var.values().data();
    parallel::run(c, [&](int64_t lo, int64_t hi) {
      for (int64_t ch = lo; ch < hi; ++ch) {
        const double invstd = 1.0 / std::sqrt(static_cast<double>(rv[ch]) + eps);
        mean_v[static_cast<size_t>(ch)] = rm[ch];
        invstd_v[static_cast<size_t>(ch)] = static_cast<T>(invstd);
        const T g = gammav[ch], bta = betav[ch];
        const T muT = rm[ch], isT = static_cast<T>(invstd);
        for (int64_t i = 0; i < n; ++i) {
          const T* src = xv + (i * c + ch) * hw;
          T* dst = ov + (i * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - muT) * isT * g + bta;
        }
      }
    });
  }

  const bool needs = detail::taped_grad(
      tape, x.requires_grad() || state.gamma.requires_grad() || state.beta.requires_grad());
  detail::finish_output(out, needs, "batchnorm2d");
  if (needs) {
    auto xt = x, ot = out, gammat = state.gamma, betat = state.beta;
    const bool train = (mode == Mode::kTrain);
    tape.record([xt, ot, gammat, betat, mean_v = std::move(mean_v),
                 invstd_v = std::move(invstd_v), train, n, c, hw, m]() mutable {
      if (!ot.has_grad()) return;
      const T* g = ot.grad().data();
      const T* xv = xt.values().data();
      const T* gammav = gammat.values().data();
      const bool dx_needed = xt.requires_grad();
      const bool dgamma_needed = gammat.requires_grad();
      const bool dbeta_needed = betat.requires_grad();
      if (dx_needed) xt.ensure_grad();
      if (dgamma_needed) gammat.ensure_grad();
      if (dbeta_needed) betat.ensure_grad();
      T* xg = dx_needed ? xt.grad().data() : nullptr;
      T* gg = dgamma_needed ? gammat.grad().data() : nullptr;
      T* bg = dbeta_needed ? betat.grad().data() : nullptr;

      parallel::run(c, [&](int64_t lo, int64_t hi) {
        for (int64_t ch = lo; ch < hi; ++ch) {
          const T mu = mean_v[static_cast<size_t>(ch)];
          const T invstd = invstd_v[static_cast<size_t>(ch)];
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t i = 0; i < n; ++i) {
            const T* gsrc = g + (i * c + ch) * hw;
            const T* src = xv + (i * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
              const double xhat = static_cast<double>(src[j] - mu) * static_cast<double>(invstd);
              sum_dy += static_cast<double>(gsrc[j]);
              sum_dy_xhat += static_cast<double>(gsrc[j]) * xhat;
            }
          }
          if (gg) gg[ch] += static_cast<T>(sum_dy_xhat);
          if (bg) bg[ch] += static_cast<T>(sum_dy);
          if (xg) {
            const double scale = static_cast<double>(gammav[ch]) * static_cast<double>(invstd);
            if (train) {
              const double mean_dy = sum_dy / static_cast<double>(m);
              const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
              for (int64_t i = 0; i < n; ++i) {
                const T* gsrc = g + (i * c + ch) * hw;
                const T* src = xv + (i * c + ch) * hw;
                T* dst = xg + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                  const double xhat = static_cast<double>(src[j] - mu) * static_cast<double>(invstd);
                  dst[j] += static_cast<T>(scale * (static_cast<double>(gsrc[j]) - mean_dy - xhat * mean_dy_xhat));
                }
              }
            } else {
              for (int64_t i = 0; i < n; ++i) {
                const T* gsrc = g + (i * c + ch) * hw;
                T* dst = xg + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) dst[j] += static_cast<T>(scale * static_cast<double>(gsrc[j]));
              }
            }
          }
        }
      });
    });
  }
  return out;
}

/// Mean label-smoothed cross entropy over the batch; softmax is computed
/// with max subtraction for stability.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                std::span<const int32_t> labels, double smoothing) {
  if (logits.rank() != 2) throw ValidationError("softmax_cross_entropy expects logits [N,C]");
  if (smoothing < 0 || smoothing >= 1) {
    throw ValidationError("label smoothing must be in [0,1), got " + std::to_string(smoothing));
  }
  const int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ValidationError("label count " + std::to_string(labels.size()) +
                          " does not match batch size " + std::to_string(n));
  }
  for (int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c) {
      throw ValidationError("label " + std::to_string(labels[static_cast<size_t>(i)]) +
                            " out of range [0," + std::to_string(c) + ") at row " + std::to_string(i));
    }
  }

  const T* lv = logits.values().data();
  std::vector<T> probs(static_cast<size_t>(n * c));
  double loss_acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = lv + i * c;
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = mx + std::log(sum);
    double row_loss = 0;
    const int64_t y = labels[static_cast<size_t>(i)];
    for (int64_t j = 0; j < c; ++j) {
      const double logp = static_cast<double>(row[j]) - log_z;
      probs[static_cast<size_t>(i * c + j)] = static_cast<T>(std::exp(logp));
      const double q = smoothing / static_cast<double>(c) + (j == y ? 1.0 - smoothing : 0.0);
      row_loss -= q * logp;
    }
    loss_acc += row_loss;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss_acc / static_cast<double>(n)));

  const bool needs = detail::taped_grad(tape, logits.requires_grad());
  detail::finish_output(out, needs, "softmax_cross_entropy");
  if (needs) {
    auto lt = logits, ot = out;
    std::vector<int32_t> ycopy(labels.begin(), labels.end());
    tape.record([lt, ot, probs = std::move(probs), ycopy = std::move(ycopy), smoothing, n, c]() mutable {
      if (!ot.has_grad() || !lt.requires_grad()) return;
      lt.ensure_grad();
      const T gscale = static_cast<T>(static_cast<double>(ot.grad()[0]) / static_cast<double>(n));
      T* lg = lt.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        const int64_t y = ycopy[static_cast<size_t>(i)];
        for (int64_t j = 0; j < c; ++j) {
          const double q = smoothing / static_cast<double>(c) + (j == y ? 1.0 - smoothing : 0.0);
          lg[i * c + j] += gscale * (probs[static_cast<size_t>(i * c + j)] - static_cast<T>(q));
        }
      }
    });
  }
  return out;
}

/// Scalar sum of all elements.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  const bool needs = detail::taped_grad(tape, x.requires_grad());
  detail::finish_output(out, needs, "sum");
  if (needs) {
    auto xt = x, ot = out;
    tape.record([xt, ot]() mutable {
      if (!ot.has_grad() || !xt.requires_grad()) return;
      xt.ensure_grad();
      const T g = ot.grad()[0];
      for (auto& v : xt.grad()) v += g;
    });
  }
  return out;
}

}  // namespace lcforge
