#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace lcforge {

enum class Trans { kNo, kYes };

/// C (MxN, row-major) = [beta * C] + op(A) * op(B).
/// A and B are row-major with leading dimensions lda/ldb holding the
/// *stored* row length (so op(A)=A^T means A is stored K-rows x M-cols).
/// Single-threaded on purpose; callers parallelize over disjoint units.
template <typename T>
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k, const T* a,
          int64_t lda, const T* b, int64_t ldb, bool accumulate, T* c,
          int64_t ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<const Mat, Eigen::Unaligned, Eigen::OuterStride<>>;
  using MapMut = Eigen::Map<Mat, Eigen::Unaligned, Eigen::OuterStride<>>;

  MapMut cm(c, m, n, Eigen::OuterStride<>(ldc));
  const auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };

  if (ta == Trans::kNo && tb == Trans::kNo) {
    run(Map(a, m, k, Eigen::OuterStride<>(lda)), Map(b, k, n, Eigen::OuterStride<>(ldb)));
  } else if (ta == Trans::kNo && tb == Trans::kYes) {
    run(Map(a, m, k, Eigen::OuterStride<>(lda)), Map(b, n, k, Eigen::OuterStride<>(ldb)).transpose());
  } else if (ta == Trans::kYes && tb == Trans::kNo) {
    run(Map(a, k, m, Eigen::OuterStride<>(lda)).transpose(), Map(b, k, n, Eigen::OuterStride<>(ldb)));
  } else {
    run(Map(a, k, m, Eigen::OuterStride<>(lda)).transpose(), Map(b, n, k, Eigen::OuterStride<>(ldb)).transpose());
  }
}

}  // namespace lcforge
