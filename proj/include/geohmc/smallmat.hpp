#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "geohmc/rng.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

/// Thrown when a Cholesky pivot is non-positive. Carries the failing pivot
/// index so callers can report exactly where an allegedly SPD matrix broke.
class NotPositiveDefiniteError : public std::runtime_error {
 public:
  explicit NotPositiveDefiniteError(Index pivot)
      : std::runtime_error("matrix is not positive definite (pivot " +
                           std::to_string(pivot) + ")"),
        pivot_(pivot) {}

  Index pivot() const { return pivot_; }

 private:
  Index pivot_;
};

/// Unblocked lower Cholesky of a symmetric matrix. Only the lower triangle of
/// `m` is read. Throws NotPositiveDefiniteError on the first bad pivot; no
/// regularization is ever applied.
template <typename Scalar>
Matrix<Scalar> cholesky(const Matrix<Scalar>& m) {
  const Index n = m.rows();
  Matrix<Scalar> chol = Matrix<Scalar>::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    Scalar d = m(j, j);
    for (Index k = 0; k < j; ++k) d -= chol(j, k) * chol(j, k);
    if (!(d > Scalar(0))) throw NotPositiveDefiniteError(j);
    chol(j, j) = std::sqrt(d);
    for (Index i = j + 1; i < n; ++i) {
      Scalar s = m(i, j);
      for (Index k = 0; k < j; ++k) s -= chol(i, k) * chol(j, k);
      chol(i, j) = s / chol(j, j);
    }
  }
  return chol;
}

/// Solve m x = rhs given the lower factor of m = L L^T.
template <typename Scalar>
Vector<Scalar> solve_cholesky(const Matrix<Scalar>& chol,
                              const Vector<Scalar>& rhs) {
  Vector<Scalar> y =
      chol.template triangularView<Eigen::Lower>().solve(rhs);
  return chol.transpose().template triangularView<Eigen::Upper>().solve(y);
}

template <typename Scalar>
Vector<Scalar> solve_spd(const Matrix<Scalar>& m, const Vector<Scalar>& rhs) {
  return solve_cholesky(cholesky(m), rhs);
}

template <typename Scalar>
Matrix<Scalar> inverse_cholesky(const Matrix<Scalar>& chol) {
  const Index n = chol.rows();
  Matrix<Scalar> inv_l = chol.template triangularView<Eigen::Lower>().solve(
      Matrix<Scalar>::Identity(n, n));
  return inv_l.transpose() * inv_l;
}

template <typename Scalar>
Matrix<Scalar> inverse_spd(const Matrix<Scalar>& m) {
  return inverse_cholesky(cholesky(m));
}

template <typename Scalar>
Scalar log_det_cholesky(const Matrix<Scalar>& chol) {
  Scalar acc = Scalar(0);
  for (Index i = 0; i < chol.rows(); ++i) acc += std::log(chol(i, i));
  return Scalar(2) * acc;
}

template <typename Scalar>
Scalar log_det_spd(const Matrix<Scalar>& m) {
  return log_det_cholesky(cholesky(m));
}

/// Draw x ~ N(0, L L^T) as L z with z i.i.d. standard normal from `rng`.
template <typename Scalar, typename Rng>
Vector<Scalar> sample_gaussian(const Matrix<Scalar>& chol, Rng& rng) {
  Vector<Scalar> z = standard_normal_vector<Scalar>(rng, chol.rows());
  return chol.template triangularView<Eigen::Lower>() * z;
}

/// Largest singular value by power iteration on m^T m. Deterministic start;
/// restarts on a basis vector if the iterate lands in the null space.
template <typename Scalar>
Scalar spectral_norm_power(const Matrix<Scalar>& m) {
  const Index n = m.cols();
  const Matrix<Scalar> gram = m.transpose() * m;
  if (gram.norm() == Scalar(0)) return Scalar(0);

  Vector<Scalar> v = Vector<Scalar>::Ones(n) / std::sqrt(Scalar(n));
  Scalar lambda = Scalar(0);
  for (Index start = 0; start <= n; ++start) {
    if (start > 0) v = Vector<Scalar>::Unit(n, start - 1);
    lambda = v.dot(gram * v);
    bool stuck = false;
    for (int iter = 0; iter < 500; ++iter) {
      Vector<Scalar> w = gram * v;
      const Scalar norm = w.norm();
      if (norm == Scalar(0)) {
        stuck = true;
        break;
      }
      v = w / norm;
      const Scalar next = v.dot(gram * v);
      if (std::abs(next - lambda) <= Scalar(1e-10) * std::max(next, Scalar(1))) {
        lambda = next;
        break;
      }
      lambda = next;
    }
    if (!stuck) break;
  }
  return std::sqrt(std::max(lambda, Scalar(0)));
}

/// Largest singular value. Uses the closed form via the 2x2 Gram matrix
/// eigenvalues when possible, power iteration otherwise.
template <typename Scalar>
Scalar spectral_norm(const Matrix<Scalar>& m) {
  if (!m.allFinite()) return std::numeric_limits<Scalar>::quiet_NaN();
  if (m.rows() == 2 && m.cols() == 2) {
    const Matrix<Scalar> gram = m.transpose() * m;
    const Scalar half_trace = (gram(0, 0) + gram(1, 1)) / Scalar(2);
    const Scalar half_gap = (gram(0, 0) - gram(1, 1)) / Scalar(2);
    const Scalar radius =
        std::sqrt(half_gap * half_gap + gram(0, 1) * gram(1, 0));
    return std::sqrt(std::max(half_trace + radius, Scalar(0)));
  }
  return spectral_norm_power(m);
}

}  // namespace geohmc
