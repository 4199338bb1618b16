#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "geohmc/smallmat.hpp"
#include "geohmc/target.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

template <typename S>
struct IntegratorConfig {
  S epsilon{S(0.1)};
  int n_leapfrog{20};
  int max_fpi{100};
  S fpi_tol{S(1e-10)};
  S contraction_threshold{S(1.2)};

  void validate() const {
    if (!(epsilon >= S(0)) || !std::isfinite(epsilon))
      throw std::invalid_argument("epsilon must be finite and >= 0");
    if (n_leapfrog < 0)
      throw std::invalid_argument("n_leapfrog must be >= 0");
    if (max_fpi < 1) throw std::invalid_argument("max_fpi must be >= 1");
    if (!(fpi_tol > S(0)))
      throw std::invalid_argument("fpi_tol must be > 0");
  }
};

enum class Existence { Yes, No, Unknown };

/// Outcome of one implicit half-step solve.
template <typename S>
struct FpiReport {
  bool converged{false};
  int iterations{0};
  S residual{0};
  /// Spectral norm of the iteration map's Jacobian at the final iterate.
  S contraction{0};
  Existence fixed_point_exists{Existence::Unknown};
  Vector<S> result;
};

/// The momentum half-step equation at a fixed position, reduced to the data
/// the solvers actually iterate on:
///   grad_theta_H(theta0, p) = drift_i - 1/2 p^T curvature_i p
/// with curvature_i = G^{-1} dG_i G^{-1}. Building this once per position and
/// reusing it across fixed-point and Newton iterations (and across many
/// momentum draws in the stability sweeps) keeps the inner loops free of
/// metric evaluations and heap traffic.
template <typename S>
struct MomentumHalfStepProblem {
  Vector<S> drift;                    // -dL/dtheta_i + 1/2 tr(G^{-1} dG_i)
  std::vector<Matrix<S>> curvature;   // G^{-1} dG_i G^{-1}
  MetricBundle<S> bundle;
  S log_density{};

  Index dimension() const { return drift.size(); }

  void grad_theta_h(const Vector<S>& p, Vector<S>& out) const {
    if (ws_.size() != p.size()) ws_.resize(p.size());
    out = drift;
    for (Index i = 0; i < drift.size(); ++i) {
      ws_.noalias() = curvature[static_cast<std::size_t>(i)] * p;
      out[i] -= S(0.5) * p.dot(ws_);
    }
  }

  Vector<S> grad_theta_h(const Vector<S>& p) const {
    Vector<S> out(drift.size());
    grad_theta_h(p, out);
    return out;
  }

  /// Jacobian of grad_theta_H in p: row i is -(curvature_i p)^T.
  void grad_theta_h_jacobian(const Vector<S>& p, Matrix<S>& out) const {
    if (ws_.size() != p.size()) ws_.resize(p.size());
    const Index d = drift.size();
    out.resize(d, d);
    for (Index i = 0; i < d; ++i) {
      ws_.noalias() = curvature[static_cast<std::size_t>(i)] * p;
      out.row(i) = -ws_.transpose();
    }
  }

 private:
  mutable Vector<S> ws_;
};

template <ManifoldTarget T, typename S = typename T::Scalar>
MomentumHalfStepProblem<S> make_half_step_problem(const T& target,
                                                  const Vector<S>& theta) {
  MomentumHalfStepProblem<S> problem;
  problem.bundle = target.metric(theta);
  problem.log_density = target.log_density(theta);
  const Index d = theta.size();
  const Vector<S> grad = target.grad_log_density(theta);
  problem.drift.resize(d);
  problem.curvature.resize(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) {
    const Matrix<S>& dg = problem.bundle.d_g[static_cast<std::size_t>(i)];
    const Matrix<S> ginv_dg = problem.bundle.g_inv * dg;
    problem.drift[i] = -grad[i] + S(0.5) * ginv_dg.trace();
    problem.curvature[static_cast<std::size_t>(i)] =
        ginv_dg * problem.bundle.g_inv;
  }
  return problem;
}

/// Metric evaluation that never throws: returns nullopt for non-finite
/// positions or tensors, so diverged trajectories stay contained.
template <ManifoldTarget T, typename S = typename T::Scalar>
std::optional<MetricBundle<S>> try_metric(const T& target,
                                          const Vector<S>& theta) {
  if (!theta.allFinite()) return std::nullopt;
  try {
    MetricBundle<S> bundle = target.metric(theta);
    if (!bundle.g.allFinite() || !bundle.chol.allFinite() ||
        !bundle.g_inv.allFinite() || !std::isfinite(bundle.log_det))
      return std::nullopt;
    return bundle;
  } catch (const std::runtime_error&) {
    return std::nullopt;
  }
}

template <ManifoldTarget T, typename S = typename T::Scalar>
std::optional<MomentumHalfStepProblem<S>> try_half_step_problem(
    const T& target, const Vector<S>& theta) {
  if (!theta.allFinite()) return std::nullopt;
  try {
    MomentumHalfStepProblem<S> problem = make_half_step_problem(target, theta);
    if (!problem.drift.allFinite()) return std::nullopt;
    for (const auto& c : problem.curvature)
      if (!c.allFinite()) return std::nullopt;
    return problem;
  } catch (const std::runtime_error&) {
    return std::nullopt;
  }
}

/// H(theta, p) = -log pi(theta) + 1/2 log((2 pi)^D det G) + 1/2 p^T G^{-1} p.
template <typename S>
S hamiltonian_from_bundle(S log_density, const MetricBundle<S>& bundle,
                          const Vector<S>& p) {
  const S d = S(p.size());
  const S log_2pi = std::log(S(2) * std::numbers::pi_v<S>);
  return -log_density + S(0.5) * (d * log_2pi + bundle.log_det) +
         S(0.5) * p.dot(bundle.g_inv * p);
}

template <ManifoldTarget T, typename S = typename T::Scalar>
S hamiltonian(const T& target, const PhaseState<S>& state) {
  if (!state.all_finite()) return std::numeric_limits<S>::quiet_NaN();
  auto bundle = try_metric(target, state.position);
  if (!bundle) return std::numeric_limits<S>::quiet_NaN();
  return hamiltonian_from_bundle(target.log_density(state.position), *bundle,
                                 state.momentum);
}

/// Identity-mass energy used by plain HMC: -log pi(theta) + 1/2 |p|^2.
template <Target T, typename S = typename T::Scalar>
S euclidean_hamiltonian(const T& target, const PhaseState<S>& state) {
  if (!state.all_finite()) return std::numeric_limits<S>::quiet_NaN();
  return -target.log_density(state.position) +
         S(0.5) * state.momentum.squaredNorm();
}

template <ManifoldTarget T, typename S = typename T::Scalar>
Vector<S> grad_theta_H(const T& target, const PhaseState<S>& state) {
  return make_half_step_problem(target, state.position)
      .grad_theta_h(state.momentum);
}

template <ManifoldTarget T, typename S = typename T::Scalar>
Vector<S> grad_p_H(const T& target, const PhaseState<S>& state) {
  return target.metric(state.position).g_inv * state.momentum;
}

namespace detail {

// Residual blow-up factor treated as divergence; avoids overflow pollution
// while leaving genuinely slow convergence to the max_fpi cap.
inline constexpr double kFpiGrowthLimit = 1e6;

}  // namespace detail

/// Solve p_half = p0 - (eps/2) grad_theta_H(theta0, p_half) by fixed-point
/// iteration from p0. The contraction field is the spectral norm of the
/// iteration map's Jacobian, (eps/2) * d(grad_theta_H)/dp, at the returned
/// iterate. A failed solve hands back the visited point with the smallest
/// fixed-point residual |M(x) - x| (for a divergence straight out of p0 that
/// is p0 itself), so the half-kick degrades to a no-op instead of launching
/// the trajectory with a garbage momentum: the failure then surfaces as one
/// finite Hamiltonian jump rather than an overflow cascading through every
/// later step.
template <typename S>
FpiReport<S> fpi_momentum_half_step(const MomentumHalfStepProblem<S>& problem,
                                    const Vector<S>& p0,
                                    const IntegratorConfig<S>& config) {
  const S half_eps = config.epsilon / S(2);
  FpiReport<S> report;
  report.result = p0;
  report.residual = std::numeric_limits<S>::infinity();

  Vector<S> prev = p0;
  Vector<S> next(p0.size());
  Vector<S> grad(p0.size());
  Vector<S> best = p0;
  S best_residual = std::numeric_limits<S>::infinity();
  S initial_residual = S(-1);

  for (int k = 1; k <= config.max_fpi; ++k) {
    problem.grad_theta_h(prev, grad);
    next = p0 - half_eps * grad;
    report.iterations = k;
    if (!next.allFinite()) break;
    report.residual = (next - prev).template lpNorm<Eigen::Infinity>();
    if (report.residual < best_residual) {
      best_residual = report.residual;
      best = prev;
    }
    if (report.residual <= config.fpi_tol) {
      report.converged = true;
      report.result = next;
      break;
    }
    if (k == 1) initial_residual = report.residual;
    if (initial_residual > S(0) &&
        report.residual > S(detail::kFpiGrowthLimit) * initial_residual)
      break;
    prev.swap(next);
  }

  if (!report.converged) {
    report.result = best;
    report.residual = best_residual;
  }
  report.fixed_point_exists =
      report.converged ? Existence::Yes : Existence::Unknown;

  if (report.result.allFinite()) {
    Matrix<S> jac;
    problem.grad_theta_h_jacobian(report.result, jac);
    report.contraction = spectral_norm(Matrix<S>(half_eps * jac));
  } else {
    report.contraction = std::numeric_limits<S>::quiet_NaN();
  }
  return report;
}

template <ManifoldTarget T, typename S = typename T::Scalar>
FpiReport<S> fpi_momentum_half_step(const T& target, const PhaseState<S>& state,
                                    const IntegratorConfig<S>& config) {
  return fpi_momentum_half_step(make_half_step_problem(target, state.position),
                                state.momentum, config);
}

/// Solve theta' = theta0 + (eps/2) [G(theta0)^{-1} + G(theta')^{-1}] p_half
/// by fixed-point iteration from theta0. Failure semantics match the
/// momentum solve: the lowest-residual iterate is returned.
template <ManifoldTarget T, typename S = typename T::Scalar>
FpiReport<S> fpi_position_step(const T& target, const Vector<S>& theta0,
                               const Vector<S>& p_half,
                               const IntegratorConfig<S>& config) {
  const S half_eps = config.epsilon / S(2);
  FpiReport<S> report;
  report.result = theta0;
  report.residual = std::numeric_limits<S>::infinity();
  report.contraction = std::numeric_limits<S>::quiet_NaN();

  if (!p_half.allFinite()) return report;

  const MetricBundle<S> base = target.metric(theta0);
  const Vector<S> v0 = base.g_inv * p_half;

  Vector<S> prev = theta0;
  Vector<S> next(theta0.size());
  Vector<S> best = theta0;
  S best_residual = std::numeric_limits<S>::infinity();
  S initial_residual = S(-1);

  for (int k = 1; k <= config.max_fpi; ++k) {
    const auto bundle = try_metric(target, prev);
    report.iterations = k;
    if (!bundle) break;
    next = theta0 + half_eps * (v0 + bundle->g_inv * p_half);
    if (!next.allFinite()) break;
    report.residual = (next - prev).template lpNorm<Eigen::Infinity>();
    if (report.residual < best_residual) {
      best_residual = report.residual;
      best = prev;
    }
    if (report.residual <= config.fpi_tol) {
      report.converged = true;
      report.result = next;
      break;
    }
    if (k == 1) initial_residual = report.residual;
    if (initial_residual > S(0) &&
        report.residual > S(detail::kFpiGrowthLimit) * initial_residual)
      break;
    prev.swap(next);
  }

  if (!report.converged) {
    report.result = best;
    report.residual = best_residual;
  }

  report.fixed_point_exists =
      report.converged ? Existence::Yes : Existence::Unknown;

  // Iteration map Jacobian column j: -(eps/2) G^{-1} dG_j G^{-1} p_half,
  // evaluated at the returned iterate.
  const auto final_bundle = try_metric(target, report.result);
  if (final_bundle) {
    const Index d = theta0.size();
    Matrix<S> jac(d, d);
    for (Index j = 0; j < d; ++j) {
      jac.col(j) = -half_eps * (final_bundle->g_inv *
                                (final_bundle->d_g[static_cast<std::size_t>(j)] *
                                 (final_bundle->g_inv * p_half)));
    }
    report.contraction = spectral_norm(jac);
  }
  return report;
}

/// Per-step diagnostics of the generalized leapfrog.
template <typename S>
struct StepDiagnostics {
  FpiReport<S> momentum_fpi;
  FpiReport<S> position_fpi;
  S h_before{std::numeric_limits<S>::quiet_NaN()};
  S h_after{std::numeric_limits<S>::quiet_NaN()};
  S delta_h{std::numeric_limits<S>::quiet_NaN()};
  bool diverged{false};
};

template <typename S>
struct GeneralizedStepResult {
  PhaseState<S> state;
  StepDiagnostics<S> diagnostics;
};

/// One generalized leapfrog step: implicit momentum half-step, implicit
/// position step, explicit momentum half-step. A diverged fixed-point solve
/// never aborts the step; the (possibly wild) state is returned with the
/// divergence recorded so the Metropolis correction can deal with it.
template <ManifoldTarget T, typename S = typename T::Scalar>
GeneralizedStepResult<S> generalized_leapfrog_step(
    const T& target, const PhaseState<S>& state,
    const IntegratorConfig<S>& config) {
  const S half_eps = config.epsilon / S(2);
  GeneralizedStepResult<S> out;
  out.state = state;

  const auto problem = try_half_step_problem(target, state.position);
  if (!problem) {
    out.diagnostics.diverged = true;
    return out;
  }
  out.diagnostics.h_before = hamiltonian_from_bundle(
      problem->log_density, problem->bundle, state.momentum);

  out.diagnostics.momentum_fpi =
      fpi_momentum_half_step(*problem, state.momentum, config);
  const Vector<S>& p_half = out.diagnostics.momentum_fpi.result;

  out.diagnostics.position_fpi =
      fpi_position_step(target, state.position, p_half, config);
  out.state.position = out.diagnostics.position_fpi.result;

  // The closing explicit kick fires even when a solve failed: with the
  // fallback momentum the state stays bounded, and the step hands MH a
  // well-defined proposal whose energy error reflects the failure.
  const auto end_problem = try_half_step_problem(target, out.state.position);
  if (end_problem) {
    Vector<S> grad(p_half.size());
    end_problem->grad_theta_h(p_half, grad);
    out.state.momentum = p_half - half_eps * grad;
  } else {
    out.state.momentum = p_half;
  }
  if (end_problem && out.state.momentum.allFinite()) {
    out.diagnostics.h_after = hamiltonian_from_bundle(
        end_problem->log_density, end_problem->bundle, out.state.momentum);
  }

  out.diagnostics.delta_h =
      out.diagnostics.h_after - out.diagnostics.h_before;
  out.diagnostics.diverged = !out.diagnostics.momentum_fpi.converged ||
                             !out.diagnostics.position_fpi.converged;
  return out;
}

/// Classic explicit leapfrog with identity mass matrix.
template <Target T, typename S = typename T::Scalar>
PhaseState<S> leapfrog_step(const T& target, const PhaseState<S>& state,
                            const IntegratorConfig<S>& config) {
  if (!state.all_finite()) return state;
  const S half_eps = config.epsilon / S(2);
  PhaseState<S> out = state;
  out.momentum += half_eps * target.grad_log_density(out.position);
  out.position += config.epsilon * out.momentum;
  if (out.position.allFinite())
    out.momentum += half_eps * target.grad_log_density(out.position);
  return out;
}

enum class Scheme { Standard, Generalized };

template <typename S>
struct TrajectoryPoint {
  PhaseState<S> state;
  S hamiltonian{std::numeric_limits<S>::quiet_NaN()};
  /// Absent on the starting point.
  std::optional<StepDiagnostics<S>> step;
};

template <typename S>
using Trajectory = std::vector<TrajectoryPoint<S>>;

template <ManifoldTarget T, typename S = typename T::Scalar>
Trajectory<S> generalized_trajectory(const T& target,
                                     const PhaseState<S>& start,
                                     const IntegratorConfig<S>& config) {
  config.validate();
  Trajectory<S> points;
  points.reserve(static_cast<std::size_t>(config.n_leapfrog) + 1);
  points.push_back({start, hamiltonian(target, start), std::nullopt});
  PhaseState<S> state = start;
  for (int i = 0; i < config.n_leapfrog; ++i) {
    if (!state.all_finite()) {
      // Contained divergence: record the stuck state, never abort.
      StepDiagnostics<S> diag;
      diag.diverged = true;
      points.push_back(
          {state, std::numeric_limits<S>::quiet_NaN(), diag});
      continue;
    }
    auto step = generalized_leapfrog_step(target, state, config);
    state = step.state;
    points.push_back({state, step.diagnostics.h_after, step.diagnostics});
  }
  return points;
}

template <Target T, typename S = typename T::Scalar>
Trajectory<S> leapfrog_trajectory(const T& target, const PhaseState<S>& start,
                                  const IntegratorConfig<S>& config) {
  config.validate();
  Trajectory<S> points;
  points.reserve(static_cast<std::size_t>(config.n_leapfrog) + 1);
  points.push_back({start, euclidean_hamiltonian(target, start), std::nullopt});
  PhaseState<S> state = start;
  for (int i = 0; i < config.n_leapfrog; ++i) {
    const S h_before = euclidean_hamiltonian(target, state);
    state = leapfrog_step(target, state, config);
    StepDiagnostics<S> diag;
    diag.momentum_fpi.converged = true;
    diag.momentum_fpi.fixed_point_exists = Existence::Yes;
    diag.position_fpi.converged = true;
    diag.position_fpi.fixed_point_exists = Existence::Yes;
    diag.h_before = h_before;
    diag.h_after = euclidean_hamiltonian(target, state);
    diag.delta_h = diag.h_after - diag.h_before;
    points.push_back({state, diag.h_after, diag});
  }
  return points;
}

template <ManifoldTarget T, typename S = typename T::Scalar>
Trajectory<S> trajectory(const T& target, const PhaseState<S>& start,
                         const IntegratorConfig<S>& config, Scheme scheme) {
  return scheme == Scheme::Generalized
             ? generalized_trajectory(target, start, config)
             : leapfrog_trajectory(target, start, config);
}

}  // namespace geohmc
