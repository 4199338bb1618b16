#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "geohmc/integrators.hpp"
#include "geohmc/rng.hpp"
#include "geohmc/smallmat.hpp"
#include "geohmc/target.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

enum class Kernel { Hmc, Rmhmc, FimRwmh };

/// A single-step energy error above this is flagged as an integrator blow-up
/// rather than ordinary discretization error.
inline constexpr double kEnergyJumpThreshold = 10.0;

template <typename S>
struct ChainConfig {
  long n_iterations{5000};
  long burn_in{0};
  std::uint64_t seed{0};
  Kernel kernel{Kernel::Rmhmc};
  IntegratorConfig<S> integrator;
  Vector<S> init;
  /// Proposal scale for the metric random-walk kernel; <= 0 means the
  /// dimension-scaled default 2.38 / sqrt(D).
  S rwmh_scale{S(0)};

  void validate() const {
    if (n_iterations < 1)
      throw std::invalid_argument("n_iterations must be >= 1");
    if (burn_in < 0 || burn_in >= n_iterations)
      throw std::invalid_argument("burn_in must lie in [0, n_iterations)");
    integrator.validate();
  }
};

template <typename S>
struct IterationRecord {
  bool accepted{false};
  S delta_h{std::numeric_limits<S>::quiet_NaN()};
  /// Leapfrog steps in the proposal trajectory whose fixed-point solve
  /// failed.
  int fpi_divergences{0};
  /// True when some single step moved the Hamiltonian by more than
  /// kEnergyJumpThreshold.
  bool h_jump{false};
};

template <typename S>
struct TransitionResult {
  Vector<S> position;
  IterationRecord<S> record;
  Trajectory<S> trajectory;  // filled only when requested
};

namespace detail {

template <typename S>
void summarize_trajectory(const Trajectory<S>& traj, IterationRecord<S>& rec) {
  for (const auto& point : traj) {
    if (!point.step) continue;
    const auto& diag = *point.step;
    if (diag.diverged) ++rec.fpi_divergences;
    if (std::isfinite(diag.delta_h)) {
      if (std::abs(diag.delta_h) > S(kEnergyJumpThreshold)) rec.h_jump = true;
    } else {
      rec.h_jump = true;
    }
  }
}

template <typename S>
bool metropolis_accept(S log_ratio, std::mt19937_64& uniform_rng) {
  std::uniform_real_distribution<S> unit(S(0), S(1));
  const S u = unit(uniform_rng);
  return std::isfinite(log_ratio) && std::log(u) < log_ratio;
}

}  // namespace detail

/// One Riemannian-manifold HMC transition: momentum refreshed from
/// N(0, G(theta)), generalized leapfrog trajectory, accept on the full
/// Hamiltonian difference. A metric failure at the current point is a hard
/// error; failures along the proposal path are contained and rejected.
template <ManifoldTarget T, typename S = typename T::Scalar>
TransitionResult<S> rmhmc_transition(const T& target, const Vector<S>& theta,
                                     const IntegratorConfig<S>& config,
                                     std::mt19937_64& momentum_rng,
                                     std::mt19937_64& uniform_rng,
                                     bool keep_trajectory = false) {
  const auto bundle = target.metric(theta);
  PhaseState<S> start{theta, sample_gaussian(bundle.chol, momentum_rng)};

  auto traj = generalized_trajectory(target, start, config);
  TransitionResult<S> out;
  detail::summarize_trajectory(traj, out.record);

  const S h_start = traj.front().hamiltonian;
  const S h_end = traj.back().hamiltonian;
  out.record.delta_h = h_end - h_start;
  const bool finite_end = traj.back().state.all_finite();

  S log_ratio = -std::numeric_limits<S>::infinity();
  if (finite_end && std::isfinite(h_start) && std::isfinite(h_end))
    log_ratio = h_start - h_end;
  out.record.accepted = detail::metropolis_accept(log_ratio, uniform_rng);
  out.position = out.record.accepted ? traj.back().state.position : theta;
  if (keep_trajectory) out.trajectory = std::move(traj);
  return out;
}

/// One Euclidean HMC transition with identity mass matrix.
template <Target T, typename S = typename T::Scalar>
TransitionResult<S> hmc_transition(const T& target, const Vector<S>& theta,
                                   const IntegratorConfig<S>& config,
                                   std::mt19937_64& momentum_rng,
                                   std::mt19937_64& uniform_rng,
                                   bool keep_trajectory = false) {
  PhaseState<S> start{
      theta, standard_normal_vector<S>(momentum_rng, theta.size())};

  auto traj = leapfrog_trajectory(target, start, config);
  TransitionResult<S> out;
  detail::summarize_trajectory(traj, out.record);

  const S h_start = traj.front().hamiltonian;
  const S h_end = traj.back().hamiltonian;
  out.record.delta_h = h_end - h_start;
  const bool finite_end = traj.back().state.all_finite();

  S log_ratio = -std::numeric_limits<S>::infinity();
  if (finite_end && std::isfinite(h_start) && std::isfinite(h_end))
    log_ratio = h_start - h_end;
  out.record.accepted = detail::metropolis_accept(log_ratio, uniform_rng);
  out.position = out.record.accepted ? traj.back().state.position : theta;
  if (keep_trajectory) out.trajectory = std::move(traj);
  return out;
}

/// Random walk with a position-dependent Gaussian proposal
/// N(theta, s^2 G(theta)^{-1}). The proposal is asymmetric, so the
/// acceptance ratio carries the forward/reverse density correction:
///   log q(theta | theta') - log q(theta' | theta)
///     = 1/2 [logdet G(theta') - logdet G(theta)]
///       - 1/(2 s^2) [ (theta - theta')' G(theta') (theta - theta')
///                     - (theta' - theta)' G(theta) (theta' - theta) ].
template <ManifoldTarget T, typename S = typename T::Scalar>
TransitionResult<S> fim_rwmh_transition(const T& target,
                                        const Vector<S>& theta, S scale,
                                        std::mt19937_64& momentum_rng,
                                        std::mt19937_64& uniform_rng) {
  const auto bundle = target.metric(theta);
  const Index d = theta.size();
  if (!(scale > S(0))) scale = S(2.38) / std::sqrt(S(d));

  // z ~ N(0, I); theta' = theta + s L^{-T} z has covariance s^2 G^{-1}.
  const Vector<S> z = standard_normal_vector<S>(momentum_rng, d);
  const Vector<S> step =
      bundle.chol.transpose().template triangularView<Eigen::Upper>().solve(z);
  const Vector<S> proposal = theta + scale * step;

  TransitionResult<S> out;
  out.position = theta;
  S log_ratio = -std::numeric_limits<S>::infinity();
  if (proposal.allFinite()) {
    try {
      const auto prop_bundle = target.metric(proposal);
      const Vector<S> diff = proposal - theta;
      const S forward = diff.dot(bundle.g * diff);
      const S reverse = diff.dot(prop_bundle.g * diff);
      log_ratio = target.log_density(proposal) - target.log_density(theta) +
                  S(0.5) * (prop_bundle.log_det - bundle.log_det) -
                  (reverse - forward) / (S(2) * scale * scale);
    } catch (const std::runtime_error&) {
      // Metric undefined at the proposal: reject.
    }
  }
  out.record.delta_h = -log_ratio;
  out.record.accepted = detail::metropolis_accept(log_ratio, uniform_rng);
  if (out.record.accepted) out.position = proposal;
  return out;
}

template <typename S>
struct ChainOutput {
  /// Post-burn-in positions, one row per kept iteration.
  Matrix<S> samples;
  S accept_rate{};  // over kept iterations
  std::vector<IterationRecord<S>> records;  // all iterations
  double seconds{};
};

template <ManifoldTarget T, typename S = typename T::Scalar>
ChainOutput<S> run_chain(const T& target, const ChainConfig<S>& config) {
  config.validate();
  Vector<S> theta = config.init.size() == target.dimension()
                        ? config.init
                        : Vector<S>(Vector<S>::Zero(target.dimension()));

  auto momentum_rng = make_stream(config.seed, Stream::Momentum, 0);
  auto uniform_rng = make_stream(config.seed, Stream::MhUniform, 0);

  ChainOutput<S> out;
  out.records.reserve(static_cast<std::size_t>(config.n_iterations));
  const long kept = config.n_iterations - config.burn_in;
  out.samples.resize(kept, target.dimension());

  long accepted = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (long iter = 0; iter < config.n_iterations; ++iter) {
    TransitionResult<S> result;
    switch (config.kernel) {
      case Kernel::Rmhmc:
        result = rmhmc_transition(target, theta, config.integrator,
                                  momentum_rng, uniform_rng);
        break;
      case Kernel::Hmc:
        result = hmc_transition(target, theta, config.integrator,
                                momentum_rng, uniform_rng);
        break;
      case Kernel::FimRwmh:
        result = fim_rwmh_transition(target, theta, config.rwmh_scale,
                                     momentum_rng, uniform_rng);
        break;
    }
    theta = result.position;
    out.records.push_back(result.record);
    if (iter >= config.burn_in) {
      out.samples.row(iter - config.burn_in) = theta.transpose();
      if (result.record.accepted) ++accepted;
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds = std::chrono::duration<double>(t1 - t0).count();
  out.accept_rate = S(accepted) / S(kept);
  return out;
}

/// Batch-means Monte Carlo standard error: split the series into
/// K = floor(sqrt(N)) consecutive batches and return
/// sd(batch means) / sqrt(K). Robust to the autocorrelation MCMC output
/// carries, unlike the iid formula.
template <typename S>
S batch_means_se(const Vector<S>& series) {
  const Index n = series.size();
  if (n < 4) return std::numeric_limits<S>::quiet_NaN();
  const Index k = static_cast<Index>(std::floor(std::sqrt(double(n))));
  const Index batch = n / k;

  Vector<S> means(k);
  for (Index b = 0; b < k; ++b)
    means[b] = series.segment(b * batch, batch).mean();
  const S grand = means.mean();
  const S var = (means.array() - grand).square().sum() / S(k - 1);
  return std::sqrt(var / S(k));
}

}  // namespace geohmc
