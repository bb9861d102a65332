#pragma once

// Independent reference implementations used only by tests. Everything here
// deliberately avoids the library's compute paths (no im2col, no Eigen):
// plain loops and textbook formulas.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lcforge/rng.hpp"
#include "lcforge/tensor.hpp"

namespace oracle {

// Direct 6-nested-loop cross-correlation, zero padding, no bias.
template <typename T>
lcforge::Tensor<T> conv2d_naive(const lcforge::Tensor<T>& x, const lcforge::Tensor<T>& w,
                                int64_t stride, int64_t pad) {
  const int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), win = x.dim(3);
  const int64_t c_out = w.dim(0), k = w.dim(2);
  const int64_t ho = (h + 2 * pad - k) / stride + 1;
  const int64_t wo = (win + 2 * pad - k) / stride + 1;
  lcforge::Tensor<T> out(lcforge::Shape{n, c_out, ho, wo});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t co = 0; co < c_out; ++co)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (int64_t ci = 0; ci < c_in; ++ci)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride + ky - pad;
                const int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= win) continue;
                acc += static_cast<double>(x.at({i, ci, iy, ix})) *
                       static_cast<double>(w.at({co, ci, ky, kx}));
              }
          out.at({i, co, oy, ox}) = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
lcforge::Tensor<T> pool_naive(const lcforge::Tensor<T>& x) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  lcforge::Tensor<T> out(lcforge::Shape{n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) acc += static_cast<double>(x.at({i, ch, y, xx}));
      out.at({i, ch}) = static_cast<T>(acc / static_cast<double>(h * w));
    }
  return out;
}

template <typename T>
lcforge::Tensor<T> linear_naive(const lcforge::Tensor<T>& x, const lcforge::Tensor<T>& w,
                                const lcforge::Tensor<T>& b) {
  const int64_t n = x.dim(0), f = x.dim(1), c = w.dim(0);
  lcforge::Tensor<T> out(lcforge::Shape{n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double acc = static_cast<double>(b.at({j}));
      for (int64_t q = 0; q < f; ++q)
        acc += static_cast<double>(x.at({i, q})) * static_cast<double>(w.at({j, q}));
      out.at({i, j}) = static_cast<T>(acc);
    }
  return out;
}

// Direct formula: mean over batch of -sum_c q_c log p_c.
inline double cross_entropy_naive(const std::vector<double>& logits, int64_t n, int64_t c,
                                  std::span<const int32_t> labels, double smoothing) {
  double total = 0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = logits[static_cast<size_t>(i * c)];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logits[static_cast<size_t>(i * c + j)]);
    double z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(logits[static_cast<size_t>(i * c + j)] - mx);
    const double log_z = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j) {
      const double q = smoothing / static_cast<double>(c) +
                       (j == labels[static_cast<size_t>(i)] ? 1.0 - smoothing : 0.0);
      total -= q * (logits[static_cast<size_t>(i * c + j)] - log_z);
    }
  }
  return total / static_cast<double>(n);
}

inline double mean_of(std::span<const double> v) {
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

inline double std_of(std::span<const double> v) {
  const double mu = mean_of(v);
  double acc = 0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

// Central finite difference of a scalar function at one coordinate.
inline double central_diff(const std::function<double()>& f, double& coord, double h) {
  const double saved = coord;
  coord = saved + h;
  const double fp = f();
  coord = saved - h;
  const double fm = f();
  coord = saved;
  return (fp - fm) / (2.0 * h);
}

// Classic cyclic Jacobi eigenvalue iteration for a small symmetric matrix,
// returns eigenvalues (unsorted). Used as the independent route for the
// SVD-based diversity metric.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, int64_t n) {
  auto idx = [n](int64_t r, int64_t c) { return static_cast<size_t>(r * n + c); };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = r + 1; c < n; ++c) off += a[idx(r, c)] * a[idx(r, c)];
    if (off < 1e-24) break;
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) {
        const double apq = a[idx(p, q)];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * cs;
        for (int64_t r = 0; r < n; ++r) {
          const double arp = a[idx(r, p)], arq = a[idx(r, q)];
          a[idx(r, p)] = cs * arp - sn * arq;
          a[idx(r, q)] = sn * arp + cs * arq;
        }
        for (int64_t c = 0; c < n; ++c) {
          const double apc = a[idx(p, c)], aqc = a[idx(q, c)];
          a[idx(p, c)] = cs * apc - sn * aqc;
          a[idx(q, c)] = sn * apc + cs * aqc;
        }
      }
  }
  std::vector<double> eig(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) eig[static_cast<size_t>(r)] = a[idx(r, r)];
  return eig;
}

template <typename T>
void fill_uniform(lcforge::Tensor<T>& t, lcforge::Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
double max_abs_diff(const lcforge::Tensor<T>& a, const lcforge::Tensor<T>& b) {
  double m = 0;
  auto av = a.values();
  auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  return m;
}

}  // namespace oracle
