#pragma once

#include "ocnet/integrate.hpp"
#include "ocnet/net.hpp"
#include "ocnet/ocp.hpp"
#include "ocnet/openloop.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ocnet {

/// Measurement noise n(t): piecewise constant on [k hold_dt, (k+1) hold_dt),
/// each component uniform in [-sigma, sigma].
struct NoiseSpec {
  double sigma = 0.0;
  double hold_dt = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Noise value on hold interval k. Depends only on (seed, k), never on the integrator.
Vec zoh_noise(const NoiseSpec& noise, Eigen::Index dim, std::uint64_t k);

struct ClosedLoopRun {
  TimeGrid grid;
  std::vector<Vec> states;
  std::vector<Vec> controls;  ///< what the controller returned at each grid node
  double running_cost = 0.0;
  double terminal_cost = 0.0;
  double total_cost = 0.0;
  bool diverged = false;
  std::string failure;
  std::optional<NoiseSpec> noise;
};

/// Control as a function of time and the *measured* state.
using Controller = std::function<Vec(double t, const Vec& measured)>;

Controller network_controller(const MlpParams& params);

/// Integrates x' = f(x, c(t, x + n(t))) with the running cost as an extra
/// state over [0, horizon] in a single adaptive pass; the step controller
/// resolves the jumps of n(t). Bad controllers give diverged = true, not an
/// exception.
ClosedLoopRun rollout_closed_loop(const Ocp& ocp, const Controller& controller, const Vec& x0,
                                  const IntegratorSpec& integ, const std::optional<NoiseSpec>& noise = std::nullopt);
ClosedLoopRun rollout_closed_loop(const Ocp& ocp, const MlpParams& params, const Vec& x0, const IntegratorSpec& integ,
                                  const std::optional<NoiseSpec>& noise = std::nullopt);

struct CostRatioStats {
  std::vector<double> ratios;  ///< one per non-diverged state, in state order
  std::vector<std::size_t> diverged;  ///< indices of states whose rollout diverged
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation
  double max = 0.0;
  double min = 0.0;
  double median = 0.0;  ///< lower middle for even counts
  std::size_t n_diverged = 0;
};

CostRatioStats summarize_ratios(std::vector<double> ratios, std::vector<std::size_t> diverged = {});

/// Initial states with their BVP-optimal costs.
struct ValidationSet {
  std::string problem;
  double horizon = 0.0;
  std::uint64_t seed = 0;
  std::vector<Vec> states;
  std::vector<double> costs;
};

struct EvalOptions {
  IntegratorSpec integ;
  std::optional<NoiseSpec> noise;
  int workers = 1;
};

/// Each state i uses noise seed derive_seed(noise.seed, i).
CostRatioStats evaluate_cost_ratio(const Ocp& ocp, const MlpParams& params, const ValidationSet& validation,
                                   const EvalOptions& options);
/// `controller_for(i)` gives the controller used from state i.
CostRatioStats evaluate_cost_ratio(const Ocp& ocp, const std::function<Controller(std::size_t)>& controller_for,
                                   const ValidationSet& validation, const EvalOptions& options);

/// Rows "ratio,cdf" with cdf = k / N over the sorted ratios.
void export_cdf(const CostRatioStats& stats, const std::string& path);
std::string cdf_table(const CostRatioStats& stats);

struct ValidationBuildOptions {
  std::size_t count = 100;
  std::uint64_t seed = 0;
  ShootingSpec shooting;
  IntegratorSpec integ = bvp_integrator();
  std::optional<ContinuationSchedule> schedule;  ///< default_for(ocp) when unset
  int workers = 1;
  std::size_t max_attempts = 0;  ///< total solves allowed; 0 means 3 * count
  double min_cost = 1e-12;       ///< references at or below this are rejected
};

/// Uniform states from the problem's box, each solved with continuation;
/// failed or zero-cost draws are replaced by further draws.
ValidationSet build_validation_set(const Ocp& ocp, const ValidationBuildOptions& options);

void write_validation_set(const ValidationSet& set, const std::string& path);
ValidationSet read_validation_set(const std::string& path);

}  // namespace ocnet
