#pragma once

#include "ocnet/integrate.hpp"
#include "ocnet/ocp.hpp"

#include <functional>
#include <vector>

namespace ocnet {

struct ShootingSpec {
  double residual_tol = 1e-8;
  int max_newton_iters = 40;
  double fd_eps = 1e-6;  ///< relative forward-difference step
  double damping = 1.0;  ///< first trial fraction of each Newton step
  int max_halvings = 8;
  /// Multiple-shooting segment length in seconds. The horizon is split into
  /// ceil(T / segment_length) equal segments; a value >= T is single shooting.
  double segment_length = 1.0;

  void validate() const;
};

/// Default integrator for two-point BVP solves: DP54 at 1e-10.
IntegratorSpec bvp_integrator();

struct OpenLoopSolution {
  TimeGrid grid;
  std::vector<Vec> states;
  std::vector<Vec> costates;
  std::vector<Vec> controls;
  double total_cost = 0.0;
  double residual = 0.0;  ///< 2-norm of continuity defects and terminal condition
  double terminal_residual = 0.0;  ///< |lambda(T) - dM/dx(x(T))|
  bool converged = false;
  int newton_iters = 0;

  /// Joint (x, lambda, running cost) trajectory for dense output.
  IvpResult trajectory;
  /// Multiple-shooting node times and (x, lambda) values at the converged point.
  std::vector<double> node_times;
  std::vector<Vec> node_values;

  double horizon() const { return grid.t1; }
};

/// x(t), lambda(t) and u*(x(t), lambda(t)) at an arbitrary time.
struct PmpPoint {
  Vec x;
  Vec lambda;
  Vec u;
};
PmpPoint sample_solution(const Ocp& ocp, const OpenLoopSolution& sol, double t);

/// Starting point for the shooting unknowns. With no profile the interior
/// nodes get x decaying linearly from x0 to 0 and lambda = 0.
struct ShootingGuess {
  Vec lambda0;
  /// (x, lambda) estimate at time t, used to seed interior shooting nodes.
  std::function<Vec(double t)> profile;
};

OpenLoopSolution solve_shooting(const Ocp& ocp, const Vec& x0, const Vec& lambda0_guess, const ShootingSpec& spec,
                                const IntegratorSpec& integ);
OpenLoopSolution solve_shooting(const Ocp& ocp, const Vec& x0, const ShootingGuess& guess, const ShootingSpec& spec,
                                const IntegratorSpec& integ);

/// Residual norm of the shooting system at a guess, without any Newton step.
double shooting_residual(const Ocp& ocp, const Vec& x0, const ShootingGuess& guess, const ShootingSpec& spec,
                         const IntegratorSpec& integ);

enum class MarchKind { TimeMarching, SpaceMarching };

struct ContinuationSchedule {
  MarchKind kind = MarchKind::TimeMarching;
  std::vector<double> stages{1.0};

  void validate() const;
  static ContinuationSchedule time_marching(std::vector<double> stages);
  static ContinuationSchedule space_marching(std::vector<double> stages);
  /// {1/8, 1/4, 1/2, 1} in time for the satellite, five equal scalings for the quadrotor.
  static ContinuationSchedule default_for(const Ocp& ocp);
};

/// Guess for stage `next` derived from the converged solution of the stage before.
ShootingGuess continuation_guess(const ContinuationSchedule& schedule, const OpenLoopSolution& prev, double prev_stage,
                                 double next_stage);

OpenLoopSolution solve_with_continuation(const Ocp& ocp, const Vec& x0, const ContinuationSchedule& schedule,
                                         const ShootingSpec& spec, const IntegratorSpec& integ);

/// Scalar LQR reference from the backward Riccati equation.
struct LqrOracle {
  double cost = 0.0;
  IvpResult riccati;  ///< integrated in reversed time s = T - t
  IvpResult state;    ///< closed-loop x(t)
  double horizon = 0.0;
  double a = 0.0, b = 1.0, r = 1.0;

  double p(double t) const;
  double feedback(double t, double x) const { return -(b / r) * p(t) * x; }
  double control(double t) const;
};

LqrOracle lqr_oracle(double a, double b, double q, double r, double mT, double T, double x0);

}  // namespace ocnet
