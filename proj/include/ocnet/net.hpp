#pragma once

#include "ocnet/integrate.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ocnet {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// (t, x) -> hidden... -> u with tanh on hidden layers and identity output.
struct MlpArch {
  int state_dim = 1;
  int control_dim = 1;
  std::vector<int> hidden{64, 64, 64};
  bool time_input = true;

  int input_dim() const { return state_dim + (time_input ? 1 : 0); }
  int layers() const { return static_cast<int>(hidden.size()) + 1; }
  int fan_in(int layer) const { return layer == 0 ? input_dim() : hidden[static_cast<std::size_t>(layer - 1)]; }
  int fan_out(int layer) const {
    return layer + 1 == layers() ? control_dim : hidden[static_cast<std::size_t>(layer)];
  }
  std::size_t param_count() const;
  bool operator==(const MlpArch&) const = default;
};

/// Flat parameter vector, per layer W (fan_out x fan_in, row-major) then b.
struct MlpParams {
  MlpArch arch;
  Vec theta;

  MlpParams() = default;
  explicit MlpParams(MlpArch a);

  std::size_t offset(int layer) const;
  Eigen::Map<const RowMat> weight(int layer) const;
  Eigen::Map<RowMat> weight(int layer);
  Eigen::Map<const Vec> bias(int layer) const;
  Eigen::Map<Vec> bias(int layer);
};

/// Gradient with the same layout as the parameters it belongs to.
using MlpGrad = MlpParams;

MlpParams init_params(const MlpArch& arch, std::uint64_t seed);
MlpParams init_params(int n, int m, std::uint64_t seed);

/// Network input column [t; x] (or x alone when the arch has no time input).
Vec net_input(const MlpArch& arch, double t, const Vec& x);

Vec forward(const MlpParams& p, double t, const Vec& x);
/// Columns of `inputs` are network inputs; returns one control per column.
Mat forward_batch(const MlpParams& p, const Mat& inputs);

struct BackwardResult {
  MlpGrad grad;
  Vec dx;  ///< gradient with respect to the state part of the input
};

BackwardResult backward(const MlpParams& p, double t, const Vec& x, const Vec& upstream);

/// Reverse pass for a batch: returns the parameter gradient summed over
/// columns in index order, and (optionally) the gradient for every input column.
Vec backward_batch(const MlpParams& p, const Mat& inputs, const Mat& upstream, Mat* d_inputs = nullptr);

/// Pre-activations and activations of a batched forward pass, kept so one
/// forward can serve several reverse passes.
struct ForwardCache {
  std::vector<Mat> acts;  ///< acts[0] = inputs, acts[l+1] = output of layer l
};
Mat forward_batch(const MlpParams& p, const Mat& inputs, ForwardCache& cache);
Vec backward_cached(const MlpParams& p, const ForwardCache& cache, const Mat& upstream, Mat* d_inputs = nullptr);

struct AdamState {
  Vec m;
  Vec v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(std::size_t size, double lr);
};

void adam_step(AdamState& state, MlpParams& params, const Vec& grad);

struct CheckpointMeta {
  std::string problem;
  double horizon = 0.0;
  std::uint64_t seed = 0;
  std::string stage;  ///< init | sl | do | finetune
  std::string init_scheme = "uniform_fan_in";
};

struct Checkpoint {
  CheckpointMeta meta;
  MlpParams params;
  std::optional<AdamState> optimizer;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
/// Also checks the network dimensions against the problem it will control.
Checkpoint load_checkpoint(const std::string& path, const std::string& problem, int state_dim, int control_dim);

}  // namespace ocnet
