#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace ocnet {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Right-hand side x' = f(t, x). Must be a pure function of its arguments:
/// replaying recorded steps relies on repeated calls returning identical bits.
using VectorField = std::function<Vec(double t, const Vec& x)>;

enum class Scheme { DormandPrince54, BogackiShampine23, FixedRK4 };

struct IntegratorSpec {
  Scheme scheme = Scheme::DormandPrince54;
  double abs_tol = 1e-5;
  double rel_tol = 1e-5;
  std::size_t max_steps = 200000;
  /// First trial step for adaptive schemes; the step for FixedRK4.
  /// Defaults to (t1 - t0) / 100.
  std::optional<double> initial_step;

  void validate() const;
};

struct TimeGrid {
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<double> nodes;
};

/// One accepted step. Invariant: the next record starts at exactly t + h
/// (floating-point sum), and the last one ends at exactly t1.
struct StepRecord {
  double t = 0.0;
  double h = 0.0;
  Vec x;
};

struct IvpResult {
  Scheme scheme = Scheme::DormandPrince54;
  TimeGrid grid;
  std::vector<Vec> states;       ///< one per grid node
  std::vector<Vec> derivatives;  ///< f(t, x) at each node, for Hermite output
  std::vector<StepRecord> step_records;
  std::size_t n_rejected = 0;
  std::size_t n_evaluations = 0;

  const Vec& final_state() const { return states.back(); }
};

/// Butcher tableau with an optional embedded error row.
struct Tableau {
  int stages = 0;
  int error_order = 0;  ///< order of the lower member of the embedded pair
  bool adaptive = false;
  bool fsal = false;  ///< last stage is evaluated at the step result
  std::vector<double> c;
  std::vector<std::vector<double>> a;  ///< a[i][j], j < i
  std::vector<double> b;
  std::vector<double> e;  ///< b - b_hat; empty for fixed schemes
};

const Tableau& tableau(Scheme scheme);

/// Stage inputs Y_i of one step, retained for reverse-mode sweeps.
struct StageTrace {
  std::vector<Vec> inputs;
  std::vector<Vec> slopes;
};

/// Single explicit Runge-Kutta step of size h (h may be negative).
/// `k1`, when given, must equal f(t, x). The adaptive driver and the replay
/// path both go through this function, which is what makes replay bit-exact.
Vec rk_step(const Tableau& tab, const VectorField& f, double t, const Vec& x, double h,
            const Vec* k1 = nullptr, StageTrace* trace = nullptr, Vec* error = nullptr,
            Vec* k_last = nullptr);

/// Largest-in-magnitude step h with fl(t + h) == t_next, when one exists.
double exact_step(double t, double t_next);

IvpResult integrate_ivp(const VectorField& f, const Vec& x0, double t0, double t1,
                        const IntegratorSpec& spec);

/// Re-runs recorded steps with the fixed-step kernel of `scheme`.
/// Returns x0 followed by the state at each step end.
std::vector<Vec> replay_fixed(const VectorField& f, const Vec& x0,
                              std::span<const StepRecord> records, Scheme scheme);

/// Cubic Hermite interpolation between accepted nodes; exact at nodes.
Vec dense_sample(const IvpResult& result, double t);
std::vector<Vec> dense_sample(const IvpResult& result, std::span<const double> query_times);

/// Neumaier-compensated sum of the recorded step sizes.
double compensated_step_sum(std::span<const StepRecord> records);

}  // namespace ocnet
