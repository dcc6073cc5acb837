#pragma once

#include <cstddef>

#include <Eigen/Core>

// Dense row-major GEMM kernels on top of Eigen. All accumulate into C.

namespace plab::kernels {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

inline Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

/// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  Map(c, idx(m), idx(n)).noalias() += ConstMap(a, idx(m), idx(k)) * ConstMap(b, idx(k), idx(n));
}

/// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  Map(c, idx(m), idx(n)).noalias() += ConstMap(a, idx(m), idx(k)) * ConstMap(b, idx(n), idx(k)).transpose();
}

/// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  Map(c, idx(k), idx(n)).noalias() += ConstMap(a, idx(m), idx(k)).transpose() * ConstMap(b, idx(m), idx(n));
}

}  // namespace plab::kernels
