#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lcforge {

namespace detail {
// Activation buffers are tens of MB and are allocated/freed every step; left
// at defaults, glibc serves them with mmap and returns them to the kernel on
// free, so each step pays mmap + page-fault-zeroing costs. Keeping them in
// the heap removes that churn.
inline const bool malloc_tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return true;
}();
}  // namespace detail

/// Base error type. Subtypes map to CLI exit codes (validation -> 2,
/// contract -> 3, anything else -> 1).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad input: shapes, files, configs.
struct ValidationError : Error {
  using Error::Error;
};

/// A documented contract refuses the operation (e.g. fold with an
/// intermediate op).
struct ContractError : Error {
  using Error::Error;
};

enum class Mode { kTrain, kEval };

enum class Intermediate { kNone, kReLU, kBatchNorm, kBatchNormReLU };

inline bool intermediate_has_bn(Intermediate m) {
  return m == Intermediate::kBatchNorm || m == Intermediate::kBatchNormReLU;
}

namespace detail {
inline bool& finite_checks_flag() {
#ifdef NDEBUG
  static bool enabled = false;
#else
  static bool enabled = true;
#endif
  return enabled;
}
}  // namespace detail

inline bool finite_checks_enabled() { return detail::finite_checks_flag(); }
inline void set_finite_checks(bool on) { detail::finite_checks_flag() = on; }

/// Debug-mode guard: ops call this on their outputs so NaN/Inf never
/// propagate silently.
template <typename T>
void debug_check_finite(std::span<const T> values, const char* op_name) {
  if (!finite_checks_enabled()) return;
  for (size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(static_cast<double>(values[i]))) {
      throw Error(std::string("non-finite value produced by ") + op_name +
                  " at flat index " + std::to_string(i));
    }
  }
}

}  // namespace lcforge
