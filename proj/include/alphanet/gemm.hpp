#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <type_traits>

namespace alphanet {

/// Row-major C = alpha * op(A) * op(B) + beta * C with explicit leading dimensions.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "gemm supports float and double");
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat, 0, Stride> C(c, M, N, Stride(static_cast<Eigen::Index>(ldc)));
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  // Stored shapes: op(A) is m x k, so A itself is k x m when transposed.
  const CMap A(a, trans_a ? K : M, trans_a ? M : K, Stride(static_cast<Eigen::Index>(lda)));
  const CMap B(b, trans_b ? N : K, trans_b ? K : N, Stride(static_cast<Eigen::Index>(ldb)));
  if (!trans_a && !trans_b) {
    C.noalias() += alpha * A * B;
  } else if (!trans_a) {
    C.noalias() += alpha * A * B.transpose();
  } else if (!trans_b) {
    C.noalias() += alpha * A.transpose() * B;
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

}  // namespace alphanet
