#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "geohmc/target.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

enum class QuadratureRule { Simpson, Trapezoid };

enum class Moment {
  MeanTheta1,
  MeanTheta2,
  MeanTheta2Sq,
  MeanRidge,  // E[theta1 + theta2^2]
  ProbTheta2Pos,
};

template <typename S>
struct QuadratureRange {
  S lo{};
  S hi{};
  int n_points{0};
};

template <typename S>
struct QuadratureGrid {
  QuadratureRange<S> theta1;
  QuadratureRange<S> theta2;
  QuadratureRule rule{QuadratureRule::Simpson};

  void validate() const {
    for (const auto& r : {theta1, theta2}) {
      if (!(r.lo < r.hi)) throw std::invalid_argument("range requires lo < hi");
      if (r.n_points < 3)
        throw std::invalid_argument("quadrature needs n_points >= 3");
      if (rule == QuadratureRule::Simpson && r.n_points % 2 == 0)
        throw std::invalid_argument("Simpson rule needs odd n_points");
    }
  }
};

/// Symmetric grid wide enough that the Gaussian prior truncates negligibly:
/// +-8 sigma_theta in each coordinate.
template <typename Model, typename S = typename Model::Scalar>
QuadratureGrid<S> default_grid(const Model& model, int n_points = 401) {
  const S span = S(8) * model.sigma_theta;
  return {{-span, span, n_points}, {-span, span, n_points}};
}

namespace detail {

template <typename S>
std::vector<S> quad_weights(const QuadratureRange<S>& range,
                            QuadratureRule rule) {
  const int n = range.n_points;
  const S h = (range.hi - range.lo) / S(n - 1);
  std::vector<S> w(static_cast<std::size_t>(n));
  if (rule == QuadratureRule::Simpson) {
    for (int i = 0; i < n; ++i)
      w[static_cast<std::size_t>(i)] =
          h / S(3) * (i == 0 || i == n - 1 ? S(1) : (i % 2 == 1 ? S(4) : S(2)));
  } else {
    for (int i = 0; i < n; ++i)
      w[static_cast<std::size_t>(i)] = h * (i == 0 || i == n - 1 ? S(0.5) : S(1));
  }
  return w;
}

template <typename S>
std::vector<S> quad_nodes(const QuadratureRange<S>& range) {
  const int n = range.n_points;
  const S h = (range.hi - range.lo) / S(n - 1);
  std::vector<S> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    x[static_cast<std::size_t>(i)] = range.lo + h * S(i);
  return x;
}

template <typename S>
S moment_integrand(Moment moment, S t1, S t2) {
  switch (moment) {
    case Moment::MeanTheta1:
      return t1;
    case Moment::MeanTheta2:
      return t2;
    case Moment::MeanTheta2Sq:
      return t2 * t2;
    case Moment::MeanRidge:
      return t1 + t2 * t2;
    case Moment::ProbTheta2Pos:
      return t2 > S(0) ? S(1) : (t2 == S(0) ? S(0.5) : S(0));
  }
  return std::numeric_limits<S>::quiet_NaN();
}

template <typename S>
[[noreturn]] void throw_bad_integrand(S t1, S t2) {
  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "non-finite integrand at grid point (%.17g, %.17g)",
                static_cast<double>(t1), static_cast<double>(t2));
  throw std::runtime_error(buf);
}

}  // namespace detail

/// E[f(theta)] under the (unnormalized) posterior by tensor-product
/// quadrature: both the f-weighted and plain integrals of exp(L) share the
/// max-log-density shift, so the normalizing constant and the shift cancel
/// in the ratio (log-sum-exp stabilization).
template <Target T, typename S = typename T::Scalar>
S posterior_moment(const T& target, const QuadratureGrid<S>& grid,
                   Moment moment) {
  grid.validate();
  const auto x1 = detail::quad_nodes(grid.theta1);
  const auto x2 = detail::quad_nodes(grid.theta2);
  const auto w1 = detail::quad_weights(grid.theta1, grid.rule);
  const auto w2 = detail::quad_weights(grid.theta2, grid.rule);

  Matrix<S> log_post(x1.size(), x2.size());
  Vector<S> theta(2);
  S max_log = -std::numeric_limits<S>::infinity();
  for (std::size_t i = 0; i < x1.size(); ++i) {
    for (std::size_t j = 0; j < x2.size(); ++j) {
      theta << x1[i], x2[j];
      const S lp = target.log_density(theta);
      if (std::isnan(lp) || lp == std::numeric_limits<S>::infinity())
        detail::throw_bad_integrand(x1[i], x2[j]);
      log_post(static_cast<Index>(i), static_cast<Index>(j)) = lp;
      max_log = std::max(max_log, lp);
    }
  }
  if (!std::isfinite(max_log))
    throw std::runtime_error("posterior vanishes on the whole grid");

  S numer = S(0), denom = S(0);
  for (std::size_t i = 0; i < x1.size(); ++i) {
    for (std::size_t j = 0; j < x2.size(); ++j) {
      const S f = detail::moment_integrand(moment, x1[i], x2[j]);
      if (!std::isfinite(f)) detail::throw_bad_integrand(x1[i], x2[j]);
      const S mass =
          w1[i] * w2[j] *
          std::exp(log_post(static_cast<Index>(i), static_cast<Index>(j)) -
                   max_log);
      numer += f * mass;
      denom += mass;
    }
  }
  if (!(denom > S(0)))
    throw std::runtime_error("posterior vanishes on the whole grid");
  return numer / denom;
}

}  // namespace geohmc
