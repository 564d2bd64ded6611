#pragma once

#include "ocnet/config.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ocnet {

inline constexpr const char* kToolVersion = "0.1.0";

/// What a command produced. The same information is written to
/// `<out_dir>/manifest_<command>.json`.
struct CommandResult {
  std::string manifest_path;
  std::map<std::string, std::string> artifacts;  ///< role -> path
  std::map<std::string, double> results;
  std::map<std::string, double> seconds;  ///< wall clock per stage
};

/// Artifact paths inside the output directory.
struct RunLayout {
  std::string dir;

  std::string dataset() const { return dir + "/dataset.csv"; }
  std::string holdout() const { return dir + "/holdout.csv"; }
  std::string checkpoint(const std::string& stage) const { return dir + "/" + stage + ".ckpt"; }
  std::string steps_log(const std::string& stage) const { return dir + "/" + stage + "_steps.csv"; }
  std::string epochs_log(const std::string& stage) const { return dir + "/" + stage + "_epochs.csv"; }
  std::string validation(const std::string& box) const { return dir + "/validation_" + box + ".csv"; }
  std::string stats(const std::string& tag, double sigma) const;
  std::string cdf(const std::string& tag, double sigma) const;
  std::string landscape(const std::string& loss) const { return dir + "/landscape_" + loss + ".csv"; }
  std::string manifest(const std::string& command) const { return dir + "/manifest_" + command + ".json"; }
};

/// `solutions`, when given, receives the converged solves behind the training dataset.
CommandResult cmd_gen_data(const ExperimentConfig& cfg, std::vector<SolvedTrajectory>* solutions = nullptr);

struct TrainOptions {
  std::string stage = "sl";  ///< sl | do | finetune
  bool run_pretrain = false;  ///< finetune: run the SL stage first instead of loading it
  std::optional<std::string> init_checkpoint;  ///< start point for do (and for sl)
};

/// sl needs the dataset in out_dir; finetune needs out_dir/sl.ckpt unless run_pretrain.
CommandResult cmd_train(const ExperimentConfig& cfg, const TrainOptions& options);

struct EvalCommandOptions {
  std::string checkpoint;
  std::vector<double> noise_levels;  ///< empty: the config's list
};

/// Builds (or reuses) the validation set, then writes one stats document and
/// one CDF table per noise level.
CommandResult cmd_eval(const ExperimentConfig& cfg, const EvalCommandOptions& options);

/// Validation references for the config's problem, cached in out_dir.
ValidationSet validation_set_for(const ExperimentConfig& cfg, double* build_seconds = nullptr);

struct LandscapeOptions {
  std::string loss = "sl";  ///< sl | do
  std::optional<std::string> checkpoint;  ///< fresh initialization when unset
  bool quadratic_self_test = false;
};

CommandResult cmd_landscape(const ExperimentConfig& cfg, const LandscapeOptions& options);

/// l(theta) = |theta|^2 / 2 probed on the config's scale grid; throws Error
/// unless effective_beta is 1 to 1e-10.
LandscapeReport quadratic_self_test(const std::vector<double>& scales, std::uint64_t seed);

struct BvpSolveOptions {
  std::optional<std::vector<double>> x0;  ///< drawn from the init box when unset
  std::size_t sample_index = 0;
};

/// Single open-loop solve written as "t,x...,lambda...,u..." rows.
CommandResult cmd_bvp_solve(const ExperimentConfig& cfg, const BvpSolveOptions& options);

}  // namespace ocnet
