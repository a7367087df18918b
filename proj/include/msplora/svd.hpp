#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msplora/error.hpp"
#include "msplora/matrix.hpp"

namespace msplora {

namespace detail {

// Cyclic Jacobi eigenvalue iteration on a symmetric matrix held in `s`
// (dense n x n, row-major). Only eigenvalues are needed, so rotations are
// applied to the matrix alone. Converges when the off-diagonal Frobenius
// mass drops below 1e-12 of the diagonal mass; one extra polishing sweep
// afterwards pushes the residual to round-off.
inline void jacobi_eigenvalues(std::vector<double>& s, std::size_t n) {
  constexpr int kMaxSweeps = 100;
  constexpr double kRelTol = 1e-12;
  auto at = [&](std::size_t i, std::size_t j) -> double& { return s[i * n + j]; };

  auto sweep = [&]() {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double app = at(p, p);
        const double aqq = at(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = t * c;
        // rows/columns p and q of the symmetric matrix
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = at(k, p);
          const double akq = at(k, q);
          at(k, p) = at(p, k) = c * akp - sn * akq;
          at(k, q) = at(q, k) = sn * akp + c * akq;
        }
        at(p, p) = app - t * apq;
        at(q, q) = aqq + t * apq;
        at(p, q) = at(q, p) = 0.0;
      }
    }
  };

  for (int iter = 0; iter < kMaxSweeps; ++iter) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += at(i, i) * at(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * at(i, j) * at(i, j);
    }
    if (off <= kRelTol * kRelTol * diag || off == 0.0) {
      if (off != 0.0) sweep();  // polish
      return;
    }
    sweep();
  }
  throw NumericError("svd_values: Jacobi iteration did not converge in 100 sweeps");
}

}  // namespace detail

/// Singular values of m in non-increasing order, via a symmetric Jacobi
/// eigen-decomposition of the smaller Gram matrix (m*m^T or m^T*m).
/// Eigenvalues that are round-off residue of the Gram formation (anything
/// negative or below 1e-11 of the largest eigenvalue) are clamped to zero
/// before the square root.
inline std::vector<double> svd_values(const Matrix& m) {
  if (m.empty()) throw ShapeError("svd_values: empty matrix");
  if (!m.all_finite()) {
    throw NumericError("svd_values: input contains non-finite entries");
  }
  const bool wide = m.rows() <= m.cols();
  const Matrix gram = wide ? matmul_nt(m, m) : matmul_tn(m, m);
  const std::size_t n = gram.rows();

  std::vector<double> s = gram.data();
  detail::jacobi_eigenvalues(s, n);

  std::vector<double> eig(n);
  double max_eig = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    eig[i] = s[i * n + i];
    max_eig = std::max(max_eig, eig[i]);
  }
  const double floor = 1e-11 * max_eig;
  std::vector<double> sv(n);
  for (std::size_t i = 0; i < n; ++i) {
    sv[i] = eig[i] <= floor ? 0.0 : std::sqrt(eig[i]);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

}  // namespace msplora
