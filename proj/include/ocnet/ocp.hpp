#pragma once

#include "ocnet/integrate.hpp"
#include "ocnet/kinematics.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <functional>
#include <memory>
#include <string>

namespace ocnet {

/// Per-dimension bounds of the initial-state distribution.
struct InitBox {
  Vec lo;
  Vec hi;

  Eigen::Index dim() const { return lo.size(); }
  void validate() const;
};

/// Fixed-horizon optimal control problem
///   minimize M(x(T)) + int_0^T L(x, u) dt   s.t.  x' = f(x, u), x(0) = x0
/// with analytic first derivatives and the closed-form Hamiltonian minimizer.
/// Instances are immutable and may be shared between threads.
class Ocp {
 public:
  virtual ~Ocp() = default;

  virtual std::string name() const = 0;
  int state_dim() const { return n_; }
  int control_dim() const { return m_; }
  double horizon() const { return horizon_; }
  const InitBox& init_box() const { return box_; }

  virtual Vec dynamics(const Vec& x, const Vec& u) const = 0;
  virtual Mat dynamics_dx(const Vec& x, const Vec& u) const = 0;
  virtual Mat dynamics_du(const Vec& x, const Vec& u) const = 0;

  virtual double running_cost(const Vec& x, const Vec& u) const = 0;
  virtual Vec running_cost_dx(const Vec& x, const Vec& u) const = 0;
  virtual Vec running_cost_du(const Vec& x, const Vec& u) const = 0;

  virtual double terminal_cost(const Vec& x) const = 0;
  virtual Vec terminal_cost_dx(const Vec& x) const = 0;

  /// argmin_u L(x, u) + lambda^T f(x, u).
  virtual Vec optimal_control(const Vec& x, const Vec& lambda) const = 0;

  /// Same problem with a different horizon and initial-state box.
  virtual std::shared_ptr<const Ocp> with(double horizon, InitBox box) const = 0;
  std::shared_ptr<const Ocp> with_horizon(double horizon) const { return with(horizon, box_); }

 protected:
  Ocp(int n, int m, double horizon, InitBox box);

 private:
  int n_;
  int m_;
  double horizon_;
  InitBox box_;
};

using OcpPtr = std::shared_ptr<const Ocp>;

// ---------------------------------------------------------------------------
// Satellite attitude control with three momentum wheels.

struct SatelliteParams {
  Eigen::Matrix3d wheel_inertia;  ///< B
  Eigen::Vector3d inertia_diag{2.0, 3.0, 4.0};
  Eigen::Vector3d momentum{1.0, 1.0, 1.0};  ///< h
  double w_angle = 0.5;
  double w_rate = 5.0;
  double w_control = 0.25;
  double w_angle_final = 0.5;
  double w_rate_final = 0.5;
  double horizon = 20.0;

  SatelliteParams();
};

/// State (phi, theta, psi, w1, w2, w3); control: wheel torques.
template <typename Scalar>
Eigen::Matrix<Scalar, 6, 1> satellite_rhs(const Eigen::Matrix<Scalar, 6, 1>& x, const Eigen::Matrix<Scalar, 3, 1>& u,
                                          const SatelliteParams& p) {
  using V3 = kinematics::Vector3<Scalar>;
  const V3 angles = x.template head<3>();
  const V3 w = x.template tail<3>();
  const V3 h = p.momentum.cast<Scalar>();
  Eigen::Matrix<Scalar, 6, 1> dx;
  dx.template head<3>() = kinematics::euler_rate(angles) * w;
  const V3 torque = kinematics::wheel_skew(w) * (kinematics::rotation(angles) * h) + p.wheel_inertia.cast<Scalar>() * u;
  dx.template tail<3>() = torque.cwiseQuotient(p.inertia_diag.cast<Scalar>());
  return dx;
}

class SatelliteOcp final : public Ocp {
 public:
  explicit SatelliteOcp(SatelliteParams params = {});
  SatelliteOcp(SatelliteParams params, double horizon, InitBox box);

  static InitBox default_box();

  std::string name() const override { return "satellite"; }
  const SatelliteParams& params() const { return p_; }

  Vec dynamics(const Vec& x, const Vec& u) const override;
  Mat dynamics_dx(const Vec& x, const Vec& u) const override;
  Mat dynamics_du(const Vec& x, const Vec& u) const override;
  double running_cost(const Vec& x, const Vec& u) const override;
  Vec running_cost_dx(const Vec& x, const Vec& u) const override;
  Vec running_cost_du(const Vec& x, const Vec& u) const override;
  double terminal_cost(const Vec& x) const override;
  Vec terminal_cost_dx(const Vec& x) const override;
  Vec optimal_control(const Vec& x, const Vec& lambda) const override;
  OcpPtr with(double horizon, InitBox box) const override;

 private:
  SatelliteParams p_;
};

// ---------------------------------------------------------------------------
// Quadrotor landing.

struct QuadrotorParams {
  double mass = 2.0;
  Eigen::Vector3d inertia_diag{1.2416, 1.2416, 2.4832};
  double gravity = 9.81;
  double arm_length = 0.2;      ///< l, used only by rotor_thrusts()
  double moment_coeff = 0.05;   ///< c, used only by rotor_thrusts()
  Eigen::Vector4d control_weight{1.0, 1.0, 1.0, 1.0};  ///< diag(Q_u)
  double w_position_final = 5.0;
  double w_velocity_final = 10.0;
  double w_attitude_final = 25.0;
  double w_rate_final = 50.0;

  /// Hover control (mg, 0, 0, 0).
  Eigen::Vector4d hover_control() const { return {mass * gravity, 0.0, 0.0, 0.0}; }
  /// u = E F: total thrust and body torques from the four rotor thrusts.
  Eigen::Matrix4d mixing() const;
};

/// State (p, v_b, eta, w_b); control (total thrust, three body torques).
template <typename Scalar>
Eigen::Matrix<Scalar, 12, 1> quadrotor_rhs(const Eigen::Matrix<Scalar, 12, 1>& x, const Eigen::Matrix<Scalar, 4, 1>& u,
                                           const QuadrotorParams& p) {
  using V3 = kinematics::Vector3<Scalar>;
  const V3 v = x.template segment<3>(3);
  const V3 eta = x.template segment<3>(6);
  const V3 w = x.template segment<3>(9);
  const V3 jdiag = p.inertia_diag.cast<Scalar>();
  const kinematics::Matrix3<Scalar> r = kinematics::rotation(eta);
  const V3 g(Scalar(0), Scalar(0), Scalar(p.gravity));
  const V3 thrust(Scalar(0), Scalar(0), u[0] / Scalar(p.mass));
  const V3 torque = u.template tail<3>();
  const V3 jw = jdiag.cwiseProduct(w);
  Eigen::Matrix<Scalar, 12, 1> dx;
  dx.template segment<3>(0) = r.transpose() * v;
  dx.template segment<3>(3) = -w.cross(v) - r * g + thrust;
  dx.template segment<3>(6) = kinematics::euler_rate(eta) * w;
  dx.template segment<3>(9) = (torque - w.cross(jw)).cwiseQuotient(jdiag);
  return dx;
}

class QuadrotorOcp final : public Ocp {
 public:
  explicit QuadrotorOcp(double horizon, QuadrotorParams params = {});
  QuadrotorOcp(QuadrotorParams params, double horizon, InitBox box);

  /// x, y in [-40, 40], z in [20, 40], |v| <= 1, |phi|, |theta| <= pi/4, |psi| <= pi, w = 0.
  static InitBox full_box();
  /// x, y in [-8, 8], z in [4, 8], |v| <= 0.2, |phi|, |theta| <= pi/20, |psi| <= pi/5, w = 0.
  static InitBox small_box();

  std::string name() const override { return "quadrotor"; }
  const QuadrotorParams& params() const { return p_; }

  /// F = E^{-1} u.
  Eigen::Vector4d rotor_thrusts(const Eigen::Vector4d& u) const;

  Vec dynamics(const Vec& x, const Vec& u) const override;
  Mat dynamics_dx(const Vec& x, const Vec& u) const override;
  Mat dynamics_du(const Vec& x, const Vec& u) const override;
  double running_cost(const Vec& x, const Vec& u) const override;
  Vec running_cost_dx(const Vec& x, const Vec& u) const override;
  Vec running_cost_du(const Vec& x, const Vec& u) const override;
  double terminal_cost(const Vec& x) const override;
  Vec terminal_cost_dx(const Vec& x) const override;
  Vec optimal_control(const Vec& x, const Vec& lambda) const override;
  OcpPtr with(double horizon, InitBox box) const override;

 private:
  Vec final_weights() const;
  QuadrotorParams p_;
};

// ---------------------------------------------------------------------------
// Scalar linear-quadratic problem x' = a x + b u, L = q x^2 + r u^2, M = mT x^2.

struct ScalarLqParams {
  double a = 0.0;
  double b = 1.0;
  double q = 1.0;
  double r = 1.0;
  double terminal = 0.0;
};

class ScalarLqOcp final : public Ocp {
 public:
  ScalarLqOcp(ScalarLqParams params, double horizon, InitBox box = {});

  std::string name() const override { return "scalar_lq"; }
  const ScalarLqParams& params() const { return p_; }

  Vec dynamics(const Vec& x, const Vec& u) const override;
  Mat dynamics_dx(const Vec& x, const Vec& u) const override;
  Mat dynamics_du(const Vec& x, const Vec& u) const override;
  double running_cost(const Vec& x, const Vec& u) const override;
  Vec running_cost_dx(const Vec& x, const Vec& u) const override;
  Vec running_cost_du(const Vec& x, const Vec& u) const override;
  double terminal_cost(const Vec& x) const override;
  Vec terminal_cost_dx(const Vec& x) const override;
  Vec optimal_control(const Vec& x, const Vec& lambda) const override;
  OcpPtr with(double horizon, InitBox box) const override;

 private:
  ScalarLqParams p_;
};

// ---------------------------------------------------------------------------

OcpPtr satellite_ocp();
OcpPtr quadrotor_ocp(double horizon);

/// H = L(x, u) + lambda^T f(x, u).
double hamiltonian(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda);
/// dH/du.
Vec hamiltonian_du(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda);
/// lambda' = -(df/dx)^T lambda - dL/dx.
Vec costate_rhs(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda);

/// Feedback or open-loop control law u(t, x).
using Policy = std::function<Vec(double t, const Vec& x)>;

/// Result of integrating the state augmented with the accumulated running cost.
struct CostedTrajectory {
  IvpResult ivp;  ///< states are (x, z) with z' = L(x, u)
  double running = 0.0;
  double terminal = 0.0;
  double total = 0.0;
};

CostedTrajectory simulate(const Ocp& ocp, const Vec& x0, const Policy& policy, const IntegratorSpec& integ);

/// M(x(T)) + int L along the trajectory generated by `policy` from x0.
double total_cost(const Ocp& ocp, const Vec& x0, const Policy& policy, const IntegratorSpec& integ);

}  // namespace ocnet
