#pragma once

#include <concepts>
#include <vector>

#include "geohmc/types.hpp"

namespace geohmc {

/// Metric tensor G at one point together with everything the integrators
/// need: lower Cholesky factor, inverse, log-determinant, and the
/// per-coordinate derivatives dG/dtheta_i.
template <typename Scalar>
struct MetricBundle {
  Matrix<Scalar> g;
  Matrix<Scalar> chol;
  Matrix<Scalar> g_inv;
  Scalar log_det{};
  std::vector<Matrix<Scalar>> d_g;
};

/// Minimal target surface for flat-metric samplers (plain HMC).
template <typename T>
concept Target = requires(const T& t, const Vector<typename T::Scalar>& x) {
  typename T::Scalar;
  { t.dimension() } -> std::convertible_to<Index>;
  { t.log_density(x) } -> std::convertible_to<typename T::Scalar>;
  { t.grad_log_density(x) } -> std::convertible_to<Vector<typename T::Scalar>>;
};

/// Target that additionally carries a position-dependent metric; required by
/// the generalized leapfrog and the metric-aware kernels.
template <typename T>
concept ManifoldTarget =
    Target<T> && requires(const T& t, const Vector<typename T::Scalar>& x) {
      { t.metric(x) } -> std::convertible_to<MetricBundle<typename T::Scalar>>;
    };

}  // namespace geohmc
