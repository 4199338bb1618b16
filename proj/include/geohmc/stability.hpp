#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <thread>
#include <vector>

#include "geohmc/integrators.hpp"
#include "geohmc/model.hpp"
#include "geohmc/rng.hpp"
#include "geohmc/smallmat.hpp"
#include "geohmc/types.hpp"

namespace geohmc {

template <typename S>
struct AxisSpec {
  S lo{};
  S hi{};
  int n_cells{1};

  void validate() const {
    if (!(lo < hi) && n_cells > 1)
      throw std::invalid_argument("axis requires lo < hi");
    if (n_cells < 1) throw std::invalid_argument("axis requires n_cells >= 1");
  }

  std::vector<S> centers() const {
    std::vector<S> out;
    out.reserve(static_cast<std::size_t>(n_cells));
    if (n_cells == 1) {
      out.push_back((lo + hi) / S(2));
      return out;
    }
    const S step = (hi - lo) / S(n_cells - 1);
    for (int i = 0; i < n_cells; ++i) out.push_back(lo + step * S(i));
    return out;
  }
};

template <typename S>
struct NewtonOutcome {
  Existence verdict{Existence::Unknown};
  Vector<S> root;
  S residual{std::numeric_limits<S>::infinity()};
};

namespace detail {

inline constexpr int kNewtonMaxIterations = 200;
inline constexpr int kNewtonMaxHalvings = 30;
inline constexpr double kNewtonArmijoSlope = 1e-4;
inline constexpr double kNewtonYesResidual = 1e-8;
inline constexpr double kNewtonNoResidual = 1e3;

enum class StartOutcome { Converged, Stalled, NonFinite };

/// One damped-Newton run on R(p) = p - p0 + (eps/2) grad_theta_H(theta0, p).
/// Switches to gradient descent on |R|^2 for the rest of the run if the
/// Jacobian stops being invertible.
template <typename S>
StartOutcome newton_from_start(const MomentumHalfStepProblem<S>& problem,
                               const Vector<S>& p0, S epsilon,
                               Vector<S> p, Vector<S>& root_out,
                               S& residual_out) {
  const S half_eps = epsilon / S(2);
  const Index d = p0.size();
  Vector<S> grad(d), r(d), trial(d), trial_r(d), direction(d);
  Matrix<S> jac(d, d), newton_jac(d, d);
  bool gradient_mode = false;

  auto eval_residual = [&](const Vector<S>& q, Vector<S>& out) {
    problem.grad_theta_h(q, grad);
    out = q - p0 + half_eps * grad;
  };

  eval_residual(p, r);
  if (!r.allFinite()) return StartOutcome::NonFinite;
  S r_norm = r.template lpNorm<Eigen::Infinity>();

  for (int iter = 0; iter < kNewtonMaxIterations; ++iter) {
    if (r_norm <= S(kNewtonYesResidual)) {
      root_out = p;
      residual_out = r_norm;
      return StartOutcome::Converged;
    }

    problem.grad_theta_h_jacobian(p, jac);
    newton_jac = Matrix<S>::Identity(d, d) + half_eps * jac;

    if (!gradient_mode) {
      Eigen::FullPivLU<Matrix<S>> lu(newton_jac);
      if (lu.isInvertible()) {
        direction = lu.solve(-r);
      } else {
        gradient_mode = true;
      }
    }
    if (gradient_mode) {
      // Descent direction for 1/2 |R|^2.
      direction = -(newton_jac.transpose() * r);
      const S dn = direction.template lpNorm<Eigen::Infinity>();
      if (!(dn > S(0))) {
        residual_out = r_norm;
        root_out = p;
        return StartOutcome::Stalled;
      }
      direction *= std::min(S(1), r_norm / dn);
    }
    if (!direction.allFinite()) return StartOutcome::NonFinite;

    S alpha = S(1);
    bool reduced = false;
    for (int halving = 0; halving <= kNewtonMaxHalvings; ++halving) {
      trial = p + alpha * direction;
      eval_residual(trial, trial_r);
      if (trial_r.allFinite()) {
        const S trial_norm = trial_r.template lpNorm<Eigen::Infinity>();
        if (trial_norm <= (S(1) - S(kNewtonArmijoSlope) * alpha) * r_norm) {
          p = trial;
          r = trial_r;
          r_norm = trial_norm;
          reduced = true;
          break;
        }
      }
      alpha /= S(2);
    }
    if (!reduced) {
      root_out = p;
      residual_out = r_norm;
      return StartOutcome::Stalled;
    }
  }
  root_out = p;
  residual_out = r_norm;
  return r_norm <= S(kNewtonYesResidual) ? StartOutcome::Converged
                                         : StartOutcome::Stalled;
}

}  // namespace detail

/// Decide whether the implicit momentum half-step equation admits a solution,
/// independently of the fixed-point iteration. Damped Newton with analytic
/// Jacobian, run from p0 and four scaled variants of it. Yes requires a root
/// with residual <= 1e-8; no requires every start to blow up or stall at a
/// residual >= 1e3; anything in between stays unknown.
///
/// The equation can admit several roots, in which case different starts find
/// different ones. A caller holding a candidate root (e.g. a converged FPI
/// result) can pass it as start_hint so that the reported root is the one in
/// that basin.
template <typename S>
NewtonOutcome<S> newton_existence_oracle(
    const MomentumHalfStepProblem<S>& problem, const Vector<S>& p0,
    S epsilon, const Vector<S>* start_hint = nullptr) {
  static constexpr double kStartScales[] = {1.0, 0.5, 2.0, -1.0, 0.0};

  NewtonOutcome<S> out;
  bool all_hopeless = true;
  const int n_starts = (start_hint ? 1 : 0) + 5;
  for (int i = 0; i < n_starts; ++i) {
    Vector<S> start = start_hint
                          ? (i == 0 ? *start_hint
                                    : Vector<S>(S(kStartScales[i - 1]) * p0))
                          : Vector<S>(S(kStartScales[i]) * p0);
    Vector<S> root(p0.size());
    S residual = std::numeric_limits<S>::infinity();
    const auto status = detail::newton_from_start(
        problem, p0, epsilon, std::move(start), root, residual);
    if (status == detail::StartOutcome::Converged) {
      out.verdict = Existence::Yes;
      out.root = root;
      out.residual = residual;
      return out;
    }
    if (status == detail::StartOutcome::Stalled) {
      out.residual = std::min(out.residual, residual);
      if (residual < S(detail::kNewtonNoResidual)) all_hopeless = false;
    }
  }
  out.verdict = all_hopeless ? Existence::No : Existence::Unknown;
  return out;
}

template <ManifoldTarget T, typename S = typename T::Scalar>
NewtonOutcome<S> newton_existence_oracle(const T& target,
                                         const Vector<S>& theta0,
                                         const Vector<S>& p0, S epsilon,
                                         const Vector<S>* start_hint =
                                             nullptr) {
  return newton_existence_oracle(make_half_step_problem(target, theta0), p0,
                                 epsilon, start_hint);
}

/// Joint verdict on one momentum half-step: the fixed-point iteration's view
/// and the Newton oracle's view, plus the contraction norm evaluated at the
/// Newton root when one is available (else at the last FPI iterate).
template <typename S>
struct ClassifyOutcome {
  Existence exists{Existence::Unknown};
  bool fpi_converged{false};
  S contraction{std::numeric_limits<S>::quiet_NaN()};
  FpiReport<S> fpi;
  NewtonOutcome<S> newton;

  /// Infinity-norm gap between the two solvers' solutions; NaN unless both
  /// converged.
  S solver_gap{std::numeric_limits<S>::quiet_NaN()};
};

template <typename S>
ClassifyOutcome<S> classify_half_step(const MomentumHalfStepProblem<S>& problem,
                                      const Vector<S>& p0,
                                      const IntegratorConfig<S>& config) {
  ClassifyOutcome<S> out;
  out.fpi = fpi_momentum_half_step(problem, p0, config);
  // Seed Newton with the FPI root when there is one, so that on multi-root
  // landscapes both solvers describe the same fixed point.
  const Vector<S>* hint = out.fpi.converged ? &out.fpi.result : nullptr;
  out.newton = newton_existence_oracle(problem, p0, config.epsilon, hint);
  out.fpi_converged = out.fpi.converged;
  out.exists = out.newton.verdict;

  if (out.newton.verdict == Existence::Yes) {
    Matrix<S> jac;
    problem.grad_theta_h_jacobian(out.newton.root, jac);
    out.contraction =
        spectral_norm(Matrix<S>(config.epsilon / S(2) * jac));
    if (out.fpi.converged)
      out.solver_gap = (out.fpi.result - out.newton.root)
                           .template lpNorm<Eigen::Infinity>();
  } else {
    out.contraction = out.fpi.contraction;
  }
  return out;
}

template <ManifoldTarget T, typename S = typename T::Scalar>
ClassifyOutcome<S> classify_half_step(const T& target, const Vector<S>& theta0,
                                      const Vector<S>& p0,
                                      const IntegratorConfig<S>& config) {
  return classify_half_step(make_half_step_problem(target, theta0), p0,
                            config);
}

template <typename S>
struct StabilityGridConfig {
  AxisSpec<S> theta1_axis{S(-2), S(2), 81};
  AxisSpec<S> theta2_axis{S(-2), S(2), 81};
  int samples_per_cell{200};
  S epsilon{S(0.1)};

  long n_obs{100};
  S sigma_y{S(1)};
  S sigma_theta{S(1)};
  /// Data are simulated from the likelihood at this point (stability_map
  /// without an explicit model).
  S true_theta1{S(0)};
  S true_theta2{S(1)};

  S contraction_threshold{S(1.2)};
  std::uint64_t seed{0};
  int threads{0};  // 0 = hardware concurrency
  int max_fpi{100};
  S fpi_tol{S(1e-10)};

  void validate() const {
    theta1_axis.validate();
    theta2_axis.validate();
    if (samples_per_cell < 1)
      throw std::invalid_argument("samples_per_cell must be >= 1");
    if (!(epsilon >= S(0)))
      throw std::invalid_argument("epsilon must be >= 0");
    if (n_obs < 1) throw std::invalid_argument("n must be >= 1");
    if (!(sigma_y > S(0)) || !(sigma_theta > S(0)))
      throw std::invalid_argument("scale parameters must be > 0");
  }
};

/// Monte Carlo estimates for one grid point theta(0).
template <typename S>
struct StabilityCell {
  S theta1{};
  S theta2{};
  S p_exists{};
  S p_converges{};
  S mean_contraction{std::numeric_limits<S>::quiet_NaN()};
  int unresolved{0};
};

template <typename S>
struct StabilityMap {
  std::vector<S> theta1_centers;
  std::vector<S> theta2_centers;
  /// Row-major over (theta1, theta2): index = i1 * n2 + i2.
  std::vector<StabilityCell<S>> cells;
  /// Largest FPI/Newton solution gap observed over draws where both
  /// converged; cross-check that the two solvers agree.
  S max_solver_gap{0};
};

/// Momentum-law note: each cell draws p0 ~ N(0, G(theta0)), the distribution
/// the manifold sampler itself would use at that point. Cells use derived
/// seed streams keyed by their linear index, so any thread count produces
/// identical output.
template <typename S>
StabilityMap<S> stability_map(const WarpedGaussianModel<S>& model,
                              const StabilityGridConfig<S>& config) {
  config.validate();
  StabilityMap<S> map;
  map.theta1_centers = config.theta1_axis.centers();
  map.theta2_centers = config.theta2_axis.centers();
  const std::size_t n1 = map.theta1_centers.size();
  const std::size_t n2 = map.theta2_centers.size();
  map.cells.resize(n1 * n2);

  IntegratorConfig<S> icfg;
  icfg.epsilon = config.epsilon;
  icfg.max_fpi = config.max_fpi;
  icfg.fpi_tol = config.fpi_tol;
  icfg.contraction_threshold = config.contraction_threshold;

  const int m = config.samples_per_cell;

  std::vector<S> worker_gaps;
  auto run_cell = [&](std::size_t cell_index, S& gap_out) {
    const std::size_t i1 = cell_index / n2;
    const std::size_t i2 = cell_index % n2;
    Vector<S> theta0 =
        make_vector2(map.theta1_centers[i1], map.theta2_centers[i2]);
    const auto problem = make_half_step_problem(model, theta0);
    auto rng = make_stream(config.seed, Stream::StabilityCell,
                           static_cast<std::uint64_t>(cell_index));

    int exists_count = 0, converged_count = 0, unresolved = 0;
    int contraction_count = 0;
    S contraction_sum = S(0);
    for (int draw = 0; draw < m; ++draw) {
      const Vector<S> p0 = sample_gaussian(problem.bundle.chol, rng);
      const auto outcome = classify_half_step(problem, p0, icfg);
      if (outcome.exists == Existence::Yes) ++exists_count;
      if (outcome.exists == Existence::Unknown) ++unresolved;
      if (outcome.fpi_converged &&
          outcome.contraction <= config.contraction_threshold)
        ++converged_count;
      if (std::isfinite(outcome.contraction)) {
        contraction_sum += outcome.contraction;
        ++contraction_count;
      }
      if (std::isfinite(outcome.solver_gap))
        gap_out = std::max(gap_out, outcome.solver_gap);
    }

    StabilityCell<S>& cell = map.cells[cell_index];
    cell.theta1 = theta0[0];
    cell.theta2 = theta0[1];
    cell.p_exists = S(exists_count) / S(m);
    cell.p_converges = S(converged_count) / S(m);
    cell.unresolved = unresolved;
    if (contraction_count > 0)
      cell.mean_contraction = contraction_sum / S(contraction_count);
  };

  int n_threads = config.threads > 0
                      ? config.threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, std::min<int>(n_threads,
                                        static_cast<int>(map.cells.size())));

  worker_gaps.assign(static_cast<std::size_t>(n_threads), S(0));
  if (n_threads == 1) {
    for (std::size_t c = 0; c < map.cells.size(); ++c)
      run_cell(c, worker_gaps[0]);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int w = 0; w < n_threads; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t c = static_cast<std::size_t>(w); c < map.cells.size();
             c += static_cast<std::size_t>(n_threads))
          run_cell(c, worker_gaps[static_cast<std::size_t>(w)]);
      });
    }
    for (auto& t : pool) t.join();
  }
  map.max_solver_gap =
      *std::max_element(worker_gaps.begin(), worker_gaps.end());
  return map;
}

/// Convenience overload that simulates the dataset from the config's own
/// hyperparameters and seed.
template <typename S>
StabilityMap<S> stability_map(const StabilityGridConfig<S>& config) {
  config.validate();
  const auto model = simulate_data(
      config.n_obs, config.sigma_y, config.sigma_theta,
      make_vector2(config.true_theta1, config.true_theta2), config.seed);
  return stability_map(model, config);
}

}  // namespace geohmc
