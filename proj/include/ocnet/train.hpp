#pragma once

#include "ocnet/data.hpp"
#include "ocnet/integrate.hpp"
#include "ocnet/net.hpp"
#include "ocnet/ocp.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ocnet {

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

// ---------------------------------------------------------------------------
// supervised learning

/// Mean over the batch of |u_NN(t, x) - u|^2 and its exact gradient.
LossGrad sl_loss(const MlpParams& params, std::span<const SampleRecord> batch);
LossGrad sl_loss(const MlpParams& params, const std::vector<SampleRecord>& records, std::span<const std::size_t> batch);
/// Loss only, evaluated in chunks.
double sl_loss_value(const MlpParams& params, const std::vector<SampleRecord>& records);

struct TrainStep {
  std::size_t step = 0;
  std::string stage;  ///< sl | do | finetune
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t dropped = 0;  ///< diverged rollouts left out of this step (DO)
};

struct EpochSummary {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;  ///< NaN without a validation set
};

struct LrDecay {
  std::size_t every_n_epochs = 500;
  double factor = 0.5;
};

struct SlConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1024;
  double lr = 0.01;
  std::optional<LrDecay> lr_decay;
  std::uint64_t seed = 0;
  const Dataset* validation = nullptr;  ///< per-epoch validation loss when set
  std::function<void(const EpochSummary&)> on_epoch;

  void validate() const;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<TrainStep> steps;
  std::vector<EpochSummary> epochs;
  double wall_seconds = 0.0;  ///< not written to the CSV tables, which stay reproducible

  void append(const TrainLog& other);
};

/// "step,stage,epoch,loss,lr,dropped"
std::string steps_csv(const TrainLog& log);
/// "stage,epoch,train_loss,validation_loss"
std::string epochs_csv(const TrainLog& log);

struct TrainResult {
  MlpParams params;
  TrainLog log;
  AdamState optimizer;
};

/// Epochs over minibatches drawn from a per-epoch shuffle, Adam updates.
TrainResult train_sl(const Ocp& ocp, const Dataset& data, const MlpParams& init, const SlConfig& cfg);

// ---------------------------------------------------------------------------
// direct policy optimization

/// Mean over x0 of J(x0) = M(x(T)) + int L. The batch is integrated as one
/// joint system (one step-size sequence for all members).
struct DoEval {
  double mean_cost = 0.0;
  Vec grad;                   ///< d mean_cost / d theta; empty for loss-only calls
  std::vector<double> costs;  ///< per member
  std::size_t n_steps = 0;    ///< accepted forward steps
};

double do_loss(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0, const IntegratorSpec& integ,
               std::vector<double>* costs = nullptr);

/// Exact gradient of the discretized objective: reverse sweep through the
/// accepted steps with their sizes frozen. Stage activations are recomputed
/// one segment at a time from the state at the segment start.
DoEval do_loss_and_grad_bp(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0,
                           const IntegratorSpec& integ, int checkpoint_segments = 1);

/// Continuous adjoint: alpha' = -(f_x + f_u u_x)^T alpha - (L_x + L_u u_x),
/// g' = -(f_u u_theta)^T alpha - L_u u_theta, integrated backward from T with
/// alpha(T) = M_x. Within each segment x(t) is re-derived by replay from the
/// segment's stored start state.
DoEval do_loss_and_grad_adjoint(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0,
                                const IntegratorSpec& integ, int checkpoint_segments = 1);

enum class GradientMode { BackpropThroughRollout, AdjointOde };

struct DoConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 1024;
  double lr = 0.01;
  GradientMode gradient_mode = GradientMode::BackpropThroughRollout;
  int checkpoint_segments = 4;
  std::uint64_t seed = 0;
  IntegratorSpec integ;
  std::function<void(const TrainStep&)> on_step;

  void validate() const;
};

/// Fresh uniform batch from `box` every iteration, Adam, no lr decay. Batch
/// members whose rollout diverges are dropped from that iteration's mean.
TrainResult train_do(const Ocp& ocp, const MlpParams& init, const DoConfig& cfg, const InitBox& box,
                     const std::string& stage = "do");

struct FinetuneResult {
  MlpParams pretrained;
  MlpParams finetuned;
  TrainLog log;  ///< sl rows followed by finetune rows
  AdamState optimizer;
};

/// Stage I supervised learning from `init`, Stage II direct optimization from
/// the Stage I result. `on_boundary` sees the Stage I parameters.
FinetuneResult pretrain_finetune(const Ocp& ocp, const Dataset& data, const MlpParams& init, const SlConfig& sl,
                                 const DoConfig& ft, const InitBox& box,
                                 const std::function<void(const MlpParams&)>& on_boundary = {});

// ---------------------------------------------------------------------------
// landscape probes

using LossAndGrad = std::function<LossGrad(const Vec& theta)>;

struct LandscapePoint {
  double scale = 0.0;
  double loss = 0.0;
  double grad_change = 0.0;  ///< |grad l(theta') - grad l(theta_hat)|
  double distance = 0.0;     ///< |theta' - theta_hat|
  bool finite = true;
};

struct LandscapeReport {
  double base_loss = 0.0;
  double base_grad_norm = 0.0;
  double lr = 0.0;
  std::vector<LandscapePoint> points;
  double effective_beta = 0.0;
  double loss_min = 0.0;  ///< over the base point and all probes
  double loss_max = 0.0;  ///< +inf when any probe was non-finite
  bool any_nonfinite = false;

  /// (loss_max - loss_min) / base_loss.
  double relative_envelope() const;
};

/// theta' = theta_hat - scale * lr * grad l(theta_hat) for each scale.
LandscapeReport landscape_probe(const LossAndGrad& loss_and_grad, const Vec& theta_hat, double lr,
                                const std::vector<double>& scales);

/// `count` log-spaced values from lo to hi inclusive.
std::vector<double> log_scales(double lo, double hi, std::size_t count);

/// "scale,loss,grad_change,distance,finite" plus a summary comment line.
std::string landscape_csv(const LandscapeReport& report);

}  // namespace ocnet
