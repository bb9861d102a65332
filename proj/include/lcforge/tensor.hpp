#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/parallel.hpp"

namespace lcforge {

// Activation buffers are large and always fully overwritten by the op that
// produces them; skipping value-init halves the write traffic.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) == 0) {
      ::new (static_cast<void*>(p)) U;
    } else {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
  }
};

template <typename T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

// memory-bandwidth-bound fill, split across the pool; zeros regardless of
// split so determinism is untouched
template <typename T>
void parallel_fill(std::span<T> out, T value) {
  if (out.size() < (1u << 16)) {
    std::fill(out.begin(), out.end(), value);
    return;
  }
  parallel::run(static_cast<int64_t>(out.size()), [&](int64_t lo, int64_t hi) {
    std::fill(out.begin() + lo, out.begin() + hi, value);
  });
}

}  // namespace detail

template <typename T>
struct TensorData {
  Shape shape;
  Buffer<T> values;
  Buffer<T> grad;  // empty until a backward pass needs it
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded op
};

/// Dense n-d array handle. Copies share storage; values are written only by
/// the op that produces them, grad only accumulates during backward.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : d_(std::make_shared<TensorData<T>>()) {
    validate_shape(shape);
    const int64_t n = shape_numel(shape);
    d_->shape = std::move(shape);
    d_->values.resize(static_cast<size_t>(n));
    detail::parallel_fill<T>(d_->values, fill);
  }

  Tensor(Shape shape, const std::vector<T>& values)
      : d_(std::make_shared<TensorData<T>>()) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
      throw ValidationError("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->values.assign(values.begin(), values.end());
  }

  /// Output buffer for an op that overwrites every element; contents are
  /// indeterminate until then.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    validate_shape(shape);
    const int64_t n = shape_numel(shape);
    t.d_->shape = std::move(shape);
    t.d_->values.resize(static_cast<size_t>(n));
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(d_); }

  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  std::span<T> values() { return d_->values; }
  std::span<const T> values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool on_tape() const { return d_->on_tape; }
  void mark_on_tape() { d_->on_tape = true; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<T> grad() { return d_->grad; }
  std::span<const T> grad() const { return d_->grad; }

  void ensure_grad() {
    if (!d_->grad.empty()) return;
    d_->grad.resize(d_->values.size());
    detail::parallel_fill<T>(d_->grad, T(0));
  }
  void zero_grad() { detail::parallel_fill<T>(d_->grad, T(0)); }
  void drop_grad() {
    d_->grad.clear();
    d_->grad.shrink_to_fit();
  }

  /// Deep copy of values (grad not copied).
  Tensor clone() const {
    Tensor out = uninitialized(d_->shape);
    std::copy(d_->values.begin(), d_->values.end(), out.d_->values.begin());
    out.d_->requires_grad = d_->requires_grad;
    return out;
  }

  T& at(std::initializer_list<int64_t> idx) { return d_->values[flat(idx)]; }
  T at(std::initializer_list<int64_t> idx) const { return d_->values[flat(idx)]; }

  std::shared_ptr<TensorData<T>> data_ptr() const { return d_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ValidationError("tensor shape must have at least one dimension");
    for (int64_t d : shape) {
      if (d <= 0) throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  size_t flat(std::initializer_list<int64_t> idx) const {
    if (idx.size() != d_->shape.size()) {
      throw ValidationError("index rank mismatch for shape " + shape_str(d_->shape));
    }
    int64_t off = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      off = off * d_->shape[i] + v;
      ++i;
    }
    return static_cast<size_t>(off);
  }

  std::shared_ptr<TensorData<T>> d_;
};

}  // namespace lcforge
