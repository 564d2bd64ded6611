#pragma once

#include "ocnet/evalsim.hpp"
#include "ocnet/net.hpp"
#include "ocnet/ocp.hpp"
#include "ocnet/openloop.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ocnet {

struct SampleRecord {
  double t = 0.0;
  Vec x;
  Vec u;
};

struct DatasetMeta {
  std::string problem;
  int state_dim = 0;
  int control_dim = 0;
  double horizon = 0.0;
  std::string sampling = "uniform";  ///< uniform | adaptive
  std::size_t n_trajectories = 0;    ///< initial states drawn, failures included
  std::size_t nodes_per_trajectory = 0;
  std::size_t n_failed = 0;
  std::size_t n_records = 0;
  std::uint64_t seed = 0;
  // solver settings
  double residual_tol = 0.0;
  double abs_tol = 0.0;
  double rel_tol = 0.0;
  std::string scheme;
  std::string marching;
  std::vector<double> marching_stages;
  // diagnostics over the converged solves
  double max_residual = 0.0;
  double max_terminal_residual = 0.0;
  // adaptive sampling only
  std::vector<double> grid;
  std::vector<std::size_t> round_trajectories;
  std::vector<std::size_t> round_failures;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SampleRecord> records;
};

/// i.i.d. uniform per dimension; a dimension with lo == hi is pinned to lo.
std::vector<Vec> sample_initial_states(const InitBox& box, std::size_t count, std::uint64_t seed);

struct SolverSettings {
  ShootingSpec shooting;
  IntegratorSpec integ = bvp_integrator();
  std::optional<ContinuationSchedule> schedule;  ///< default_for(ocp) when unset
};

struct GenerationOptions {
  std::size_t n_trajectories = 100;
  std::size_t nodes_per_trajectory = 51;
  std::uint64_t seed = 0;
  SolverSettings solver;
  int workers = 1;
  double max_failure_fraction = 0.2;
};

/// One converged open-loop solve and where it started.
struct SolvedTrajectory {
  double t_offset = 0.0;  ///< absolute time of the solution's t = 0
  Vec x0;
  OpenLoopSolution solution;
};

/// Open-loop solutions from uniformly drawn initial states, sampled on
/// `nodes_per_trajectory` uniform times, shuffled by seed.
Dataset generate_uniform(const Ocp& ocp, const GenerationOptions& options,
                         std::vector<SolvedTrajectory>* solutions = nullptr);

/// Checkpoints 0 = tau_0 < tau_1 < ... < tau_K = T.
struct AdaptiveGrid {
  std::vector<double> checkpoints;

  void validate(double horizon) const;
};

/// Trains an interim controller on the data accumulated before `round`.
using InterimTrainer = std::function<MlpParams(const Dataset& accumulated, std::size_t round)>;

/// IVP-enhanced sampling. Round 0 is uniform on [0, T]; round k >= 1 rolls the
/// interim controller out from fresh initial states to tau_k and solves the
/// open-loop problem on [tau_k, T] from the states reached. The initial-state
/// budget is split over the rounds so the total equals `n_trajectories`.
Dataset generate_adaptive(const Ocp& ocp, const AdaptiveGrid& grid, const GenerationOptions& options,
                          const InterimTrainer& trainer, const IntegratorSpec& rollout_integ,
                          std::vector<SolvedTrajectory>* solutions = nullptr);

/// Sidecar metadata lives next to the table at `path + ".meta.json"`.
std::string dataset_meta_path(const std::string& path);
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

std::string scheme_name(Scheme scheme);
Scheme parse_scheme(const std::string& name);

}  // namespace ocnet
