#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "geohmc/rng.hpp"
#include "geohmc/smallmat.hpp"
#include "geohmc/target.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

/// Metric factorization failed at a point where the model guarantees an SPD
/// tensor; this is a defect, not a recoverable condition. Carries the point.
template <typename Scalar>
class MetricFactorizationError : public std::runtime_error {
 public:
  MetricFactorizationError(const Vector<Scalar>& theta, Index pivot)
      : std::runtime_error(describe(theta, pivot)), theta_(theta) {}

  const Vector<Scalar>& theta() const { return theta_; }

 private:
  static std::string describe(const Vector<Scalar>& theta, Index pivot) {
    std::ostringstream os;
    os << "metric factorization failed (pivot " << pivot << ") at theta = [";
    for (Index i = 0; i < theta.size(); ++i)
      os << (i ? ", " : "") << theta[i];
    os << "]";
    return os.str();
  }

  Vector<Scalar> theta_;
};

/// Warped bivariate Gaussian posterior: observations y_i ~ N(theta1 +
/// theta2^2, sigma_y^2) with independent N(0, sigma_theta^2) priors on both
/// coordinates. The likelihood determines only theta1 + theta2^2, so the
/// posterior is a soft ridge along that curve.
///
/// Data enter only through the sufficient statistics (n, sum_y, sum_y_sq),
/// which keeps every evaluation O(1). n = 0 is accepted and reduces the
/// posterior to the prior.
template <typename S>
struct WarpedGaussianModel {
  using Scalar = S;

  long n_obs{};
  S sigma_y{1};
  S sigma_theta{1};
  S sum_y{0};
  S sum_y_sq{0};

  WarpedGaussianModel(long n, S sy, S st, S sy_sum, S sy_sq_sum)
      : n_obs(n), sigma_y(sy), sigma_theta(st), sum_y(sy_sum),
        sum_y_sq(sy_sq_sum) {
    if (n_obs < 0) throw std::invalid_argument("n must be >= 0");
    if (!(sigma_y > S(0))) throw std::invalid_argument("sigma_y must be > 0");
    if (!(sigma_theta > S(0)))
      throw std::invalid_argument("sigma_theta must be > 0");
    if (!std::isfinite(sum_y) || !std::isfinite(sum_y_sq))
      throw std::invalid_argument("sufficient statistics must be finite");
    if (n_obs > 0) {
      // Cauchy-Schwarz: sum of squares can never undershoot (sum)^2 / n.
      const S lower = sum_y * sum_y / S(n_obs);
      const S slack = S(1e-9) * std::max(S(1), std::abs(lower));
      if (sum_y_sq < lower - slack)
        throw std::invalid_argument(
            "sum_y_sq is inconsistent with sum_y (violates Cauchy-Schwarz)");
    }
  }

  Index dimension() const { return 2; }
  S log_density(const Vector<S>& theta) const;
  Vector<S> grad_log_density(const Vector<S>& theta) const;
  MetricBundle<S> metric(const Vector<S>& theta) const;
};

template <typename S>
S log_prior(const WarpedGaussianModel<S>& model, const Vector<S>& theta) {
  const S beta = S(1) / (model.sigma_theta * model.sigma_theta);
  return -beta / S(2) * theta.squaredNorm();
}

template <typename S>
S log_likelihood(const WarpedGaussianModel<S>& model, const Vector<S>& theta) {
  const S alpha = S(1) / (model.sigma_y * model.sigma_y);
  const S mu = theta[0] + theta[1] * theta[1];
  // sum_i (y_i - mu)^2 expanded through the sufficient statistics.
  const S rss = model.sum_y_sq - S(2) * mu * model.sum_y +
                S(model.n_obs) * mu * mu;
  return -alpha / S(2) * rss;
}

template <typename S>
S log_posterior(const WarpedGaussianModel<S>& model, const Vector<S>& theta) {
  return log_likelihood(model, theta) + log_prior(model, theta);
}

template <typename S>
Vector<S> grad_log_posterior(const WarpedGaussianModel<S>& model,
                             const Vector<S>& theta) {
  const S alpha = S(1) / (model.sigma_y * model.sigma_y);
  const S beta = S(1) / (model.sigma_theta * model.sigma_theta);
  const S mu = theta[0] + theta[1] * theta[1];
  const S residual_sum = model.sum_y - S(model.n_obs) * mu;
  Vector<S> grad(2);
  grad[0] = alpha * residual_sum - beta * theta[0];
  grad[1] = S(2) * theta[1] * alpha * residual_sum - beta * theta[1];
  return grad;
}

/// Metric tensor: expected Fisher information of the likelihood plus the
/// prior precision, with analytic coordinate derivatives. G depends on
/// theta2 only, so d_g[0] is identically zero.
template <typename S>
MetricBundle<S> metric_tensor(const WarpedGaussianModel<S>& model,
                              const Vector<S>& theta) {
  const S alpha = S(1) / (model.sigma_y * model.sigma_y);
  const S beta = S(1) / (model.sigma_theta * model.sigma_theta);
  const S n = S(model.n_obs);
  const S t2 = theta[1];

  MetricBundle<S> bundle;
  bundle.g.resize(2, 2);
  bundle.g << n * alpha + beta, S(2) * n * t2 * alpha,
      S(2) * n * t2 * alpha, S(4) * n * t2 * t2 * alpha + beta;

  try {
    bundle.chol = cholesky(bundle.g);
  } catch (const NotPositiveDefiniteError& err) {
    throw MetricFactorizationError<S>(theta, err.pivot());
  }
  bundle.g_inv = inverse_cholesky(bundle.chol);
  bundle.log_det = log_det_cholesky(bundle.chol);

  bundle.d_g.resize(2);
  bundle.d_g[0] = Matrix<S>::Zero(2, 2);
  bundle.d_g[1].resize(2, 2);
  bundle.d_g[1] << S(0), S(2) * n * alpha,
      S(2) * n * alpha, S(8) * n * t2 * alpha;
  return bundle;
}

template <typename S>
S WarpedGaussianModel<S>::log_density(const Vector<S>& theta) const {
  return log_posterior(*this, theta);
}

template <typename S>
Vector<S> WarpedGaussianModel<S>::grad_log_density(
    const Vector<S>& theta) const {
  return grad_log_posterior(*this, theta);
}

template <typename S>
MetricBundle<S> WarpedGaussianModel<S>::metric(const Vector<S>& theta) const {
  return metric_tensor(*this, theta);
}

/// Draw n observations from the likelihood at `true_theta`.
template <typename S, typename Rng>
std::vector<S> simulate_observations(long n, S sigma_y,
                                     const Vector<S>& true_theta, Rng& rng) {
  const S mean = true_theta[0] + true_theta[1] * true_theta[1];
  std::normal_distribution<S> noise(S(0), S(1));
  std::vector<S> ys;
  ys.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) ys.push_back(mean + sigma_y * noise(rng));
  return ys;
}

/// Simulate a dataset and return the model holding its sufficient
/// statistics. Identical seeds give identical data.
template <typename S>
WarpedGaussianModel<S> simulate_data(long n, S sigma_y, S sigma_theta,
                                     const Vector<S>& true_theta,
                                     std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("simulate_data requires n >= 1");
  auto rng = make_stream(seed, Stream::Data, 0);
  const auto ys = simulate_observations(n, sigma_y, true_theta, rng);
  S sum = S(0), sum_sq = S(0);
  for (S y : ys) {
    sum += y;
    sum_sq += y * y;
  }
  return WarpedGaussianModel<S>(n, sigma_y, sigma_theta, sum, sum_sq);
}

}  // namespace geohmc
