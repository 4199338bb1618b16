#include "cli/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "geohmc/model.hpp"
#include "geohmc/quadrature.hpp"
#include "geohmc/samplers.hpp"
#include "geohmc/stability.hpp"
#include "geohmc/version.hpp"

namespace geohmc::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Model = WarpedGaussianModel<double>;
using Vec = Vector<double>;

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::vector<double> read_observations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read data file: " + path);
  std::vector<double> ys;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;  // header
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("malformed data row in " + path + ": " + line);
    try {
      ys.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw std::runtime_error("malformed data row in " + path + ": " + line);
    }
  }
  if (ys.empty()) throw std::runtime_error("data file has no rows: " + path);
  return ys;
}

namespace {

struct CliContext {
  std::vector<std::string> argv;  // raw args for the replay record
};

/// Where the model's data come from: an observations file or simulation
/// flags. Hyperparameters apply either way.
struct ModelFlags {
  std::string data_path;
  long n{100};
  double sigma_y{1.0};
  double sigma_theta{1.0};
  double theta1{0.0};
  double theta2{1.0};
};

void add_model_flags(CLI::App* cmd, ModelFlags& flags) {
  cmd->add_option("--data", flags.data_path,
                  "CSV of observations (header i,y); omits simulation");
  cmd->add_option("--n", flags.n, "number of simulated observations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-y", flags.sigma_y, "observation noise scale")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-theta", flags.sigma_theta, "prior scale")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--theta1", flags.theta1, "true theta1 for simulation")
      ->capture_default_str();
  cmd->add_option("--theta2", flags.theta2, "true theta2 for simulation")
      ->capture_default_str();
}

Model build_model(const ModelFlags& flags, std::uint64_t seed) {
  if (!flags.data_path.empty()) {
    const auto ys = read_observations(flags.data_path);
    double sum = 0, sum_sq = 0;
    for (double y : ys) {
      sum += y;
      sum_sq += y * y;
    }
    return Model(static_cast<long>(ys.size()), flags.sigma_y,
                 flags.sigma_theta, sum, sum_sq);
  }
  return simulate_data(flags.n, flags.sigma_y, flags.sigma_theta,
                       make_vector2(flags.theta1, flags.theta2), seed);
}

json model_flags_json(const ModelFlags& flags) {
  json j;
  if (!flags.data_path.empty()) {
    j["data"] = flags.data_path;
  } else {
    j["n"] = flags.n;
    j["theta1"] = flags.theta1;
    j["theta2"] = flags.theta2;
  }
  j["sigma_y"] = flags.sigma_y;
  j["sigma_theta"] = flags.sigma_theta;
  return j;
}

void write_manifest(const CliContext& ctx, const std::string& command,
                    std::uint64_t seed, const json& parameters,
                    const std::vector<std::string>& outputs,
                    double wall_clock_seconds,
                    const std::string& manifest_path) {
  json manifest;
  manifest["command"] = command;
  manifest["version"] = kVersion;
  manifest["seed"] = seed;
  manifest["parameters"] = parameters;
  manifest["outputs"] = outputs;
  manifest["wall_clock_seconds"] = wall_clock_seconds;
  manifest["replay_argv"] = ctx.argv;
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_{
      std::chrono::steady_clock::now()};
};

AxisSpec<double> parse_axis(const std::string& text) {
  AxisSpec<double> axis;
  const auto c1 = text.find(':');
  const auto c2 = text.find(':', c1 == std::string::npos ? c1 : c1 + 1);
  if (c1 == std::string::npos || c2 == std::string::npos)
    throw CLI::ValidationError("--grid", "expected lo:hi:n, got '" + text +
                                             "'");
  try {
    axis.lo = std::stod(text.substr(0, c1));
    axis.hi = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
    axis.n_cells = std::stoi(text.substr(c2 + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("--grid", "expected lo:hi:n, got '" + text +
                                             "'");
  }
  return axis;
}

std::pair<AxisSpec<double>, AxisSpec<double>> parse_grid(
    const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos)
    throw CLI::ValidationError(
        "--grid", "expected lo:hi:n,lo:hi:n, got '" + text + "'");
  auto axes = std::make_pair(parse_axis(text.substr(0, comma)),
                             parse_axis(text.substr(comma + 1)));
  try {
    axes.first.validate();
    axes.second.validate();
  } catch (const std::exception& err) {
    throw CLI::ValidationError("--grid", err.what());
  }
  return axes;
}

Kernel parse_kernel(const std::string& name, bool allow_rwmh) {
  if (name == "hmc") return Kernel::Hmc;
  if (name == "rmhmc") return Kernel::Rmhmc;
  if (allow_rwmh && name == "fim-rwmh") return Kernel::FimRwmh;
  throw CLI::ValidationError("--kernel", "unknown kernel '" + name + "'");
}

std::string stability_csv(const StabilityMap<double>& map) {
  std::string out = "theta1,theta2,p_exists,p_converges,mean_contraction,"
                    "unresolved\n";
  for (const auto& cell : map.cells) {
    out += format_value(cell.theta1) + "," + format_value(cell.theta2) + "," +
           format_value(cell.p_exists) + "," + format_value(cell.p_converges) +
           "," + format_value(cell.mean_contraction) + "," +
           std::to_string(cell.unresolved) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// simulate-data

void setup_simulate_data(CLI::App& app, CliContext& ctx) {
  auto* cmd = app.add_subcommand("simulate-data",
                                 "Draw observations from the likelihood");
  auto n = std::make_shared<long>(100);
  auto sigma_y = std::make_shared<double>(1.0);
  auto sigma_theta = std::make_shared<double>(1.0);
  auto theta1 = std::make_shared<double>(0.0);
  auto theta2 = std::make_shared<double>(1.0);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto out_path = std::make_shared<std::string>();

  cmd->add_option("--n", *n, "number of observations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-y", *sigma_y, "observation noise scale")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-theta", *sigma_theta, "prior scale (recorded)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--theta1", *theta1, "true theta1")->capture_default_str();
  cmd->add_option("--theta2", *theta2, "true theta2")->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed")->capture_default_str();
  cmd->add_option("--out", *out_path, "output CSV path")->required();

  cmd->callback([&ctx, n, sigma_y, sigma_theta, theta1, theta2, seed,
                 out_path]() {
    Stopwatch watch;
    auto rng = make_stream(*seed, Stream::Data, 0);
    const auto ys = simulate_observations(*n, *sigma_y,
                                          Vec(make_vector2(*theta1, *theta2)),
                                          rng);
    std::string csv = "i,y\n";
    for (std::size_t i = 0; i < ys.size(); ++i)
      csv += std::to_string(i) + "," + format_value(ys[i]) + "\n";
    write_file_atomic(*out_path, csv);

    json params{{"n", *n},
                {"sigma_y", *sigma_y},
                {"sigma_theta", *sigma_theta},
                {"theta1", *theta1},
                {"theta2", *theta2},
                {"out", *out_path}};
    write_manifest(ctx, "simulate-data", *seed, params, {*out_path},
                   watch.seconds(), *out_path + ".manifest.json");
  });
}

// ---------------------------------------------------------------------------
// density-grid

void setup_density_grid(CLI::App& app, CliContext& ctx) {
  auto* cmd = app.add_subcommand(
      "density-grid", "Tabulate log prior/likelihood/posterior on a grid");
  auto flags = std::make_shared<ModelFlags>();
  auto grid_text = std::make_shared<std::string>("-2:2:81,-2:2:81");
  auto seed = std::make_shared<std::uint64_t>(0);
  auto out_path = std::make_shared<std::string>();

  add_model_flags(cmd, *flags);
  cmd->add_option("--grid", *grid_text, "theta1 and theta2 extents lo:hi:n")
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed (simulation)")
      ->capture_default_str();
  cmd->add_option("--out", *out_path, "output CSV path")->required();

  cmd->callback([&ctx, flags, grid_text, seed, out_path]() {
    Stopwatch watch;
    const auto model = build_model(*flags, *seed);
    const auto [axis1, axis2] = parse_grid(*grid_text);
    const auto t1s = axis1.centers();
    const auto t2s = axis2.centers();

    std::vector<double> prior, lik, post;
    prior.reserve(t1s.size() * t2s.size());
    lik.reserve(prior.capacity());
    post.reserve(prior.capacity());
    double max_prior = -1e308, max_lik = -1e308, max_post = -1e308;
    for (double a : t1s) {
      for (double b : t2s) {
        const Vec theta = make_vector2(a, b);
        const double lp = log_prior(model, theta);
        const double ll = log_likelihood(model, theta);
        prior.push_back(lp);
        lik.push_back(ll);
        post.push_back(lp + ll);
        max_prior = std::max(max_prior, lp);
        max_lik = std::max(max_lik, ll);
        max_post = std::max(max_post, lp + ll);
      }
    }

    std::string csv =
        "theta1,theta2,log_prior,log_lik,log_post,log_prior_norm,"
        "log_lik_norm,log_post_norm\n";
    std::size_t k = 0;
    for (double a : t1s) {
      for (double b : t2s) {
        csv += format_value(a) + "," + format_value(b) + "," +
               format_value(prior[k]) + "," + format_value(lik[k]) + "," +
               format_value(post[k]) + "," +
               format_value(prior[k] - max_prior) + "," +
               format_value(lik[k] - max_lik) + "," +
               format_value(post[k] - max_post) + "\n";
        ++k;
      }
    }
    write_file_atomic(*out_path, csv);

    json params = model_flags_json(*flags);
    params["grid"] = *grid_text;
    params["out"] = *out_path;
    write_manifest(ctx, "density-grid", *seed, params, {*out_path},
                   watch.seconds(), *out_path + ".manifest.json");
  });
}

// ---------------------------------------------------------------------------
// trajectories

void setup_trajectories(CLI::App& app, CliContext& ctx) {
  auto* cmd = app.add_subcommand(
      "trajectories", "Record consecutive leapfrog trajectories of one chain");
  auto flags = std::make_shared<ModelFlags>();
  auto kernel_name = std::make_shared<std::string>("rmhmc");
  auto epsilon = std::make_shared<double>(0.1);
  auto steps = std::make_shared<int>(20);
  auto count = std::make_shared<int>(3);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto init1 = std::make_shared<double>(0.0);
  auto init2 = std::make_shared<double>(1.0);
  auto out_path = std::make_shared<std::string>();

  add_model_flags(cmd, *flags);
  cmd->add_option("--kernel", *kernel_name, "hmc or rmhmc")
      ->check(CLI::IsMember({"hmc", "rmhmc"}))
      ->capture_default_str();
  cmd->add_option("--epsilon", *epsilon, "leapfrog step size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--steps", *steps, "leapfrog steps per trajectory")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--count", *count, "number of consecutive trajectories")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed")->capture_default_str();
  cmd->add_option("--init1", *init1, "chain start theta1")
      ->capture_default_str();
  cmd->add_option("--init2", *init2, "chain start theta2")
      ->capture_default_str();
  cmd->add_option("--out", *out_path, "output CSV path")->required();

  cmd->callback([&ctx, flags, kernel_name, epsilon, steps, count, seed, init1,
                 init2, out_path]() {
    Stopwatch watch;
    const auto model = build_model(*flags, *seed);
    const Kernel kernel = parse_kernel(*kernel_name, false);

    IntegratorConfig<double> icfg;
    icfg.epsilon = *epsilon;
    icfg.n_leapfrog = *steps;

    auto momentum_rng = make_stream(*seed, Stream::Momentum, 0);
    auto uniform_rng = make_stream(*seed, Stream::MhUniform, 0);

    std::string csv =
        "traj_id,step,theta1,theta2,p1,p2,H,fpi_diverged,accepted\n";
    Vec theta = make_vector2(*init1, *init2);
    for (int t = 0; t < *count; ++t) {
      TransitionResult<double> result =
          kernel == Kernel::Rmhmc
              ? rmhmc_transition(model, theta, icfg, momentum_rng,
                                 uniform_rng, true)
              : hmc_transition(model, theta, icfg, momentum_rng, uniform_rng,
                               true);
      for (std::size_t k = 0; k < result.trajectory.size(); ++k) {
        const auto& point = result.trajectory[k];
        const bool diverged = point.step && point.step->diverged;
        csv += std::to_string(t) + "," + std::to_string(k) + "," +
               format_value(point.state.position[0]) + "," +
               format_value(point.state.position[1]) + "," +
               format_value(point.state.momentum[0]) + "," +
               format_value(point.state.momentum[1]) + "," +
               format_value(point.hamiltonian) + "," +
               (diverged ? "1" : "0") + "," +
               (result.record.accepted ? "1" : "0") + "\n";
      }
      theta = result.position;
    }
    write_file_atomic(*out_path, csv);

    json params = model_flags_json(*flags);
    params["kernel"] = *kernel_name;
    params["epsilon"] = *epsilon;
    params["steps"] = *steps;
    params["count"] = *count;
    params["init1"] = *init1;
    params["init2"] = *init2;
    params["out"] = *out_path;
    write_manifest(ctx, "trajectories", *seed, params, {*out_path},
                   watch.seconds(), *out_path + ".manifest.json");
  });
}

// ---------------------------------------------------------------------------
// sample

void setup_sample(CLI::App& app, CliContext& ctx) {
  auto* cmd =
      app.add_subcommand("sample", "Run an MCMC chain and summarize it");
  auto flags = std::make_shared<ModelFlags>();
  auto kernel_name = std::make_shared<std::string>("rmhmc");
  auto iterations = std::make_shared<long>(5000);
  auto burn_in = std::make_shared<long>(0);
  auto epsilon = std::make_shared<double>(0.1);
  auto steps = std::make_shared<int>(20);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto init1 = std::make_shared<double>(0.0);
  auto init2 = std::make_shared<double>(1.0);
  auto rwmh_scale = std::make_shared<double>(0.0);
  auto out_prefix = std::make_shared<std::string>();

  add_model_flags(cmd, *flags);
  cmd->add_option("--kernel", *kernel_name, "hmc, rmhmc, or fim-rwmh")
      ->check(CLI::IsMember({"hmc", "rmhmc", "fim-rwmh"}))
      ->capture_default_str();
  cmd->add_option("--iterations", *iterations, "total MCMC iterations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--burn-in", *burn_in, "discarded initial iterations")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--epsilon", *epsilon, "leapfrog step size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--steps", *steps, "leapfrog steps per proposal")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed")->capture_default_str();
  cmd->add_option("--init1", *init1, "chain start theta1")
      ->capture_default_str();
  cmd->add_option("--init2", *init2, "chain start theta2")
      ->capture_default_str();
  cmd->add_option("--rwmh-scale", *rwmh_scale,
                  "fim-rwmh proposal scale (0 = 2.38/sqrt(D))")
      ->capture_default_str();
  cmd->add_option("--out-prefix", *out_prefix,
                  "prefix for _samples.csv and _summary.json")
      ->required();

  cmd->callback([&ctx, flags, kernel_name, iterations, burn_in, epsilon,
                 steps, seed, init1, init2, rwmh_scale, out_prefix]() {
    Stopwatch watch;
    if (*burn_in >= *iterations)
      throw CLI::ValidationError("--burn-in",
                                 "must be smaller than --iterations");
    const auto model = build_model(*flags, *seed);

    ChainConfig<double> config;
    config.kernel = parse_kernel(*kernel_name, true);
    config.n_iterations = *iterations;
    config.burn_in = *burn_in;
    config.seed = *seed;
    config.integrator.epsilon = *epsilon;
    config.integrator.n_leapfrog = *steps;
    config.init = make_vector2(*init1, *init2);
    config.rwmh_scale = *rwmh_scale;

    const auto chain = run_chain(model, config);

    std::string csv = "iter,theta1,theta2\n";
    for (Index i = 0; i < chain.samples.rows(); ++i)
      csv += std::to_string(*burn_in + i) + "," +
             format_value(chain.samples(i, 0)) + "," +
             format_value(chain.samples(i, 1)) + "\n";
    const std::string samples_path = *out_prefix + "_samples.csv";
    write_file_atomic(samples_path, csv);

    long fpi_divergences = 0, h_jumps = 0;
    for (const auto& rec : chain.records) {
      fpi_divergences += rec.fpi_divergences;
      h_jumps += rec.h_jump ? 1 : 0;
    }

    const Index kept = chain.samples.rows();
    Vector<double> ridge(kept), theta2_sq(kept), positive(kept);
    for (Index i = 0; i < kept; ++i) {
      const double t1 = chain.samples(i, 0);
      const double t2 = chain.samples(i, 1);
      ridge[i] = t1 + t2 * t2;
      theta2_sq[i] = t2 * t2;
      positive[i] = t2 > 0 ? 1.0 : (t2 == 0 ? 0.5 : 0.0);
    }

    auto moment_json = [](const Vector<double>& series) {
      return json{{"estimate", series.mean()},
                  {"se", batch_means_se(series)}};
    };
    json summary;
    summary["kernel"] = *kernel_name;
    summary["iterations"] = *iterations;
    summary["burn_in"] = *burn_in;
    summary["acceptance_rate"] = chain.accept_rate;
    summary["fpi_divergence_count"] = fpi_divergences;
    summary["h_jump_count"] = h_jumps;
    summary["moments"] = json{{"mean_ridge", moment_json(ridge)},
                              {"mean_theta2_sq", moment_json(theta2_sq)},
                              {"prob_theta2_pos", moment_json(positive)}};
    const std::string summary_path = *out_prefix + "_summary.json";
    write_file_atomic(summary_path, summary.dump(2) + "\n");

    json params = model_flags_json(*flags);
    params["kernel"] = *kernel_name;
    params["iterations"] = *iterations;
    params["burn_in"] = *burn_in;
    params["epsilon"] = *epsilon;
    params["steps"] = *steps;
    params["init1"] = *init1;
    params["init2"] = *init2;
    params["rwmh_scale"] = *rwmh_scale;
    params["out_prefix"] = *out_prefix;
    write_manifest(ctx, "sample", *seed, params, {samples_path, summary_path},
                   watch.seconds(), *out_prefix + "_manifest.json");
  });
}

// ---------------------------------------------------------------------------
// stability-map

void setup_stability_map(CLI::App& app, CliContext& ctx) {
  auto* cmd = app.add_subcommand(
      "stability-map", "Fixed-point existence/convergence map over theta");
  auto epsilon = std::make_shared<double>(0.1);
  auto sigma_theta = std::make_shared<double>(1.0);
  auto grid_text = std::make_shared<std::string>("-2:2:81,-2:2:81");
  auto samples = std::make_shared<int>(200);
  auto threshold = std::make_shared<double>(1.2);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto threads = std::make_shared<int>(0);
  auto n = std::make_shared<long>(100);
  auto sigma_y = std::make_shared<double>(1.0);
  auto theta1 = std::make_shared<double>(0.0);
  auto theta2 = std::make_shared<double>(1.0);
  auto all_panels = std::make_shared<bool>(false);
  auto out_path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();

  cmd->add_option("--epsilon", *epsilon, "leapfrog step size")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-theta", *sigma_theta, "prior scale")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--grid", *grid_text, "theta1 and theta2 extents lo:hi:n")
      ->capture_default_str();
  cmd->add_option("--samples-per-cell", *samples, "momentum draws per cell")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--threshold", *threshold, "contraction threshold")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed")->capture_default_str();
  cmd->add_option("--threads", *threads, "worker threads (0 = hardware)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--n", *n, "simulated observations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--sigma-y", *sigma_y, "observation noise scale")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--theta1", *theta1, "true theta1 for simulation")
      ->capture_default_str();
  cmd->add_option("--theta2", *theta2, "true theta2 for simulation")
      ->capture_default_str();
  cmd->add_flag("--all", *all_panels,
                "run the four (epsilon, sigma_theta) panels");
  cmd->add_option("--out", *out_path, "output CSV path (single panel)");
  cmd->add_option("--out-dir", *out_dir, "output directory (--all)");

  cmd->callback([&ctx, epsilon, sigma_theta, grid_text, samples, threshold,
                 seed, threads, n, sigma_y, theta1, theta2, all_panels,
                 out_path, out_dir]() {
    Stopwatch watch;
    StabilityGridConfig<double> config;
    std::tie(config.theta1_axis, config.theta2_axis) = parse_grid(*grid_text);
    config.samples_per_cell = *samples;
    config.contraction_threshold = *threshold;
    config.seed = *seed;
    config.threads = *threads;
    config.n_obs = *n;
    config.sigma_y = *sigma_y;
    config.true_theta1 = *theta1;
    config.true_theta2 = *theta2;

    json params{{"grid", *grid_text},
                {"samples_per_cell", *samples},
                {"threshold", *threshold},
                {"threads", *threads},
                {"n", *n},
                {"sigma_y", *sigma_y},
                {"theta1", *theta1},
                {"theta2", *theta2}};

    if (*all_panels) {
      if (out_dir->empty())
        throw CLI::ValidationError("--out-dir", "required with --all");
      std::vector<std::string> outputs;
      for (double eps : {0.1, 1.0}) {
        for (double st : {0.5, 1.0}) {
          config.epsilon = eps;
          config.sigma_theta = st;
          const auto map = stability_map(config);
          char name[64];
          std::snprintf(name, sizeof(name), "stability_eps%.1f_sigma%.1f.csv",
                        eps, st);
          const std::string path = (fs::path(*out_dir) / name).string();
          write_file_atomic(path, stability_csv(map));
          outputs.push_back(path);
        }
      }
      params["all"] = true;
      params["out_dir"] = *out_dir;
      write_manifest(
          ctx, "stability-map", *seed, params, outputs, watch.seconds(),
          (fs::path(*out_dir) / "stability_all.manifest.json").string());
    } else {
      if (out_path->empty())
        throw CLI::ValidationError("--out", "required without --all");
      config.epsilon = *epsilon;
      config.sigma_theta = *sigma_theta;
      const auto map = stability_map(config);
      write_file_atomic(*out_path, stability_csv(map));
      params["epsilon"] = *epsilon;
      params["sigma_theta"] = *sigma_theta;
      params["out"] = *out_path;
      write_manifest(ctx, "stability-map", *seed, params, {*out_path},
                     watch.seconds(), *out_path + ".manifest.json");
    }
  });
}

// ---------------------------------------------------------------------------
// moments

void setup_moments(CLI::App& app, CliContext& ctx) {
  auto* cmd = app.add_subcommand(
      "moments", "Quadrature-oracle posterior moments");
  auto flags = std::make_shared<ModelFlags>();
  auto grid_points = std::make_shared<int>(401);
  auto span = std::make_shared<double>(8.0);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto out_path = std::make_shared<std::string>();

  add_model_flags(cmd, *flags);
  cmd->add_option("--grid-points", *grid_points,
                  "quadrature points per dimension (odd)")
      ->check(CLI::Range(3, 100001))
      ->capture_default_str();
  cmd->add_option("--span", *span, "half-width in units of sigma_theta")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "root seed (simulation)")
      ->capture_default_str();
  cmd->add_option("--out", *out_path, "output JSON path")->required();

  cmd->callback([&ctx, flags, grid_points, span, seed, out_path]() {
    Stopwatch watch;
    if (*grid_points % 2 == 0)
      throw CLI::ValidationError("--grid-points", "must be odd for Simpson");
    const auto model = build_model(*flags, *seed);
    const double half = *span * model.sigma_theta;
    QuadratureGrid<double> grid{{-half, half, *grid_points},
                                {-half, half, *grid_points}};

    json values;
    values["mean_theta1"] = posterior_moment(model, grid, Moment::MeanTheta1);
    values["mean_theta2"] = posterior_moment(model, grid, Moment::MeanTheta2);
    values["mean_theta2_sq"] =
        posterior_moment(model, grid, Moment::MeanTheta2Sq);
    values["mean_ridge"] = posterior_moment(model, grid, Moment::MeanRidge);
    values["prob_theta2_pos"] =
        posterior_moment(model, grid, Moment::ProbTheta2Pos);
    write_file_atomic(*out_path, values.dump(2) + "\n");
    std::cout << values.dump(2) << "\n";

    json params = model_flags_json(*flags);
    params["grid_points"] = *grid_points;
    params["span"] = *span;
    params["out"] = *out_path;
    write_manifest(ctx, "moments", *seed, params, {*out_path},
                   watch.seconds(), *out_path + ".manifest.json");
  });
}

// ---------------------------------------------------------------------------
// replay

int replay_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest: " + path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& err) {
    throw std::runtime_error("malformed manifest " + path + ": " +
                             err.what());
  }
  if (!manifest.contains("replay_argv") ||
      !manifest["replay_argv"].is_array())
    throw std::runtime_error("manifest lacks replay_argv: " + path);
  std::vector<std::string> argv;
  for (const auto& item : manifest["replay_argv"])
    argv.push_back(item.get<std::string>());
  if (!argv.empty() && argv.front() == "replay")
    throw std::runtime_error("manifest replays a replay; refusing");
  return run_cli(std::move(argv));
}

void setup_replay(CLI::App& app, int& exit_code) {
  auto* cmd = app.add_subcommand(
      "replay", "Re-run the command recorded in a manifest");
  auto manifest_path = std::make_shared<std::string>();
  cmd->add_option("manifest", *manifest_path, "manifest JSON path")
      ->required();
  cmd->callback([&exit_code, manifest_path]() {
    exit_code = replay_manifest(*manifest_path);
  });
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  CliContext ctx;
  ctx.argv = args;

  CLI::App app{"Geometric MCMC toolkit for the warped Gaussian target"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  int exit_code = 0;
  setup_simulate_data(app, ctx);
  setup_density_grid(app, ctx);
  setup_trajectories(app, ctx);
  setup_sample(app, ctx);
  setup_stability_map(app, ctx);
  setup_moments(app, ctx);
  setup_replay(app, exit_code);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return exit_code;
}

}  // namespace geohmc::cli
