#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "plab/core/error.hpp"
#include "plab/core/kernels.hpp"

namespace plab::linalg {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("matrix data does not match its shape");
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return std::sqrt(s);
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  }
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  kernels::gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

/// Aᵀ·B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn: row counts differ");
  Matrix c(a.cols, b.cols);
  kernels::gemm_tn(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

/// A·Bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt: column counts differ");
  Matrix c(a.rows, b.rows);
  kernels::gemm_nt(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.rows);
  return c;
}

/// Subtracts each column's mean.
inline Matrix center_columns(const Matrix& x) {
  Matrix out = x;
  for (std::size_t j = 0; j < x.cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) mean += x(i, j);
    mean /= static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) out(i, j) -= mean;
  }
  return out;
}

struct Svd {
  Matrix u;                    // m x k, orthonormal columns
  std::vector<double> sigma;   // k, descending, >= 0
  Matrix v;                    // n x k, orthonormal columns
};

namespace detail {

// Extends the first `filled` orthonormal columns of q (rows x k) into a full
// orthonormal set, using Gram-Schmidt against the standard basis.
inline void complete_basis(Matrix& q, const std::vector<bool>& valid) {
  const std::size_t m = q.rows, k = q.cols;
  std::size_t next_basis = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (valid[c]) continue;
    for (;;) {
      if (next_basis >= m) throw Error("basis completion failed");
      std::vector<double> cand(m, 0.0);
      cand[next_basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < k; ++o) {
          if (o == c || (!valid[o] && o > c)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += cand[i] * q(i, o);
          for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * q(i, o);
        }
      }
      double norm = 0.0;
      for (double v : cand) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (std::size_t i = 0; i < m; ++i) q(i, c) = cand[i] / norm;
      break;
    }
  }
}

}  // namespace detail

/// Thin SVD of an m x n matrix with m >= n by one-sided Jacobi rotations.
/// Columns of U whose singular value is zero are completed to an orthonormal set.
inline Svd jacobi_svd(const Matrix& a_in, double tol = 1e-15, int max_sweeps = 80) {
  if (a_in.rows < a_in.cols) {
    Svd t = jacobi_svd(transpose(a_in), tol, max_sweeps);
    return Svd{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }
  const std::size_t m = a_in.rows, n = a_in.cols;
  // Work on columns stored contiguously.
  std::vector<std::vector<double>> a(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) a[j][i] = a_in(i, j);
    v[j][j] = 1.0;
  }
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* ap = a[p].data();
        const double* aq = a[q].data();
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = a[p][i], y = a[q][i];
          a[p][i] = c * x - s * y;
          a[q][i] = s * x + c * y;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double x = v[p][i], y = v[q][i];
          v[p][i] = c * x - s * y;
          v[q][i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : a[j]) s += x * x;
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });
  const double smax = n > 0 ? norms[order[0]] : 0.0;
  const double floor = smax * static_cast<double>(std::max(m, n)) * 1e-15;
  Svd out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  std::vector<bool> valid(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    const double sigma = norms[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v[j][i];
    if (sigma > floor && sigma > 0.0) {
      out.sigma[k] = sigma;
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = a[j][i] / sigma;
      valid[k] = true;
    } else {
      out.sigma[k] = 0.0;
    }
  }
  detail::complete_basis(out.u, valid);
  return out;
}

}  // namespace plab::linalg
