// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace flans::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// C (+)= op(A) * op(B), all row-major. op(A) is [m,k], op(B) is [k,n].
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MapMat<T> C(c, M, N);
  if (!trans_a && !trans_b) {
    ConstMapMat<T> A(a, M, K);
    ConstMapMat<T> B(b, K, N);
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (trans_a && !trans_b) {
    ConstMapMat<T> A(a, K, M);
    ConstMapMat<T> B(b, K, N);
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!trans_a && trans_b) {
    ConstMapMat<T> A(a, M, K);
    ConstMapMat<T> B(b, N, K);
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    ConstMapMat<T> A(a, K, M);
    ConstMapMat<T> B(b, N, K);
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

}  // namespace flans::detail
