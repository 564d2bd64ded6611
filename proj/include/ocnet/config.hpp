#pragma once

#include "ocnet/data.hpp"
#include "ocnet/evalsim.hpp"
#include "ocnet/ocp.hpp"
#include "ocnet/train.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ocnet {

struct DatasetSettings {
  std::string sampling = "uniform";  ///< uniform | adaptive
  std::size_t n_trajectories = 100;
  std::size_t nodes_per_trajectory = 51;
  double max_failure_fraction = 0.2;
  /// Trajectories of the held-out set used for the per-epoch SL validation loss; 0 disables it.
  std::size_t holdout_trajectories = 10;
  std::vector<double> grid;  ///< adaptive checkpoints, 0 < ... < T
};

struct EvalSettings {
  std::size_t validation_count = 100;
  std::uint64_t validation_seed = 12345;
  std::vector<double> noise_levels{0.0};
  double hold_dt = 0.01;
};

struct LandscapeSettings {
  double sl_scale_lo = 0.01;
  double sl_scale_hi = 100.0;
  double do_scale_lo = 0.01;
  double do_scale_hi = 0.1;
  std::size_t points = 9;
  std::size_t sl_batch = 1024;  ///< records drawn for the SL probe loss
  std::size_t do_batch = 256;   ///< initial states drawn for the DO probe loss
};

/// Everything a run needs. A profile preset fills every field; the config
/// document then overrides individual keys.
struct ExperimentConfig {
  std::string profile = "desk";  ///< paper | desk
  std::string problem = "satellite";
  double horizon = 20.0;
  std::string init_box = "full";  ///< full | small | custom
  InitBox custom_box;
  std::uint64_t seed = 1;
  int workers = 1;
  std::string out_dir = "run";

  std::vector<int> hidden{64, 64, 64};
  IntegratorSpec rollout;  ///< closed-loop training and evaluation
  SolverSettings bvp;
  DatasetSettings dataset;
  SlConfig sl;
  DoConfig direct;
  DoConfig finetune;
  EvalSettings eval;
  LandscapeSettings landscape;

  OcpPtr make_ocp() const;
  MlpArch arch() const;
  void validate() const;
};

/// Table values for `paper`, scaled-down values for `desk`.
ExperimentConfig preset(const std::string& problem, const std::string& profile, std::optional<std::string> box = {});

/// Values given on the command line; they take precedence over the document.
struct ConfigOverrides {
  std::optional<std::string> profile;
  std::optional<std::string> problem;
  std::optional<std::string> sampling;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out_dir;
};

/// Parses a JSON config document. Unknown keys and bad values raise
/// ConfigError naming the key path.
ExperimentConfig parse_config(const std::string& json_text, const ConfigOverrides& overrides = {});
ExperimentConfig load_config(const std::string& path, const ConfigOverrides& overrides = {});
/// Full resolved config as a JSON document that parse_config accepts.
std::string config_json(const ExperimentConfig& cfg);

}  // namespace ocnet
