#include "ocnet/ocp.hpp"

#include "ocnet/errors.hpp"

#include <Eigen/LU>

#include <cmath>
#include <numbers>

namespace ocnet {

namespace kinematics {

Matrix3<double> rotation_partial(const Vector3<double>& angles, int which) {
  const double sphi = std::sin(angles[0]), cphi = std::cos(angles[0]);
  const double sth = std::sin(angles[1]), cth = std::cos(angles[1]);
  const double spsi = std::sin(angles[2]), cpsi = std::cos(angles[2]);
  // rotation() = R1(phi) R2(theta) R3(psi)
  Matrix3<double> r1, r2, r3;
  r1 << 1, 0, 0, 0, cphi, sphi, 0, -sphi, cphi;
  r2 << cth, 0, -sth, 0, 1, 0, sth, 0, cth;
  r3 << cpsi, spsi, 0, -spsi, cpsi, 0, 0, 0, 1;
  Matrix3<double> d;
  switch (which) {
    case 0:
      d << 0, 0, 0, 0, -sphi, cphi, 0, -cphi, -sphi;
      return d * r2 * r3;
    case 1:
      d << -sth, 0, -cth, 0, 0, 0, cth, 0, -sth;
      return r1 * d * r3;
    default:
      d << -spsi, cpsi, 0, -cpsi, -spsi, 0, 0, 0, 0;
      return r1 * r2 * d;
  }
}

Matrix3<double> euler_rate_partial(const Vector3<double>& angles, int which) {
  check_pitch(angles[1]);
  const double sphi = std::sin(angles[0]), cphi = std::cos(angles[0]);
  const double sth = std::sin(angles[1]), cth = std::cos(angles[1]);
  const double tth = sth / cth;
  Matrix3<double> d;
  if (which == 0) {
    d << 0, cphi * tth, -sphi * tth,  //
        0, -sphi, -cphi,              //
        0, cphi / cth, -sphi / cth;
  } else {
    const double sec2 = 1.0 / (cth * cth);
    d << 0, sphi * sec2, cphi * sec2,  //
        0, 0, 0,                       //
        0, sphi * sth * sec2, cphi * sth * sec2;
  }
  return d;
}

}  // namespace kinematics

void InitBox::validate() const {
  if (lo.size() != hi.size()) throw ConfigError("init box bounds have different dimensions");
  for (Eigen::Index i = 0; i < lo.size(); ++i) {
    if (!(lo[i] <= hi[i])) throw ConfigError("init box requires lo <= hi in every dimension");
  }
}

Ocp::Ocp(int n, int m, double horizon, InitBox box) : n_(n), m_(m), horizon_(horizon), box_(std::move(box)) {
  if (!(horizon > 0.0)) throw ConfigError("OCP horizon must be positive");
  if (box_.dim() != 0) {
    box_.validate();
    if (box_.dim() != n) throw ConfigError("init box dimension does not match the state dimension");
  }
}

// ---------------------------------------------------------------------------

SatelliteParams::SatelliteParams() {
  wheel_inertia << 1.0, 1.0 / 20.0, 1.0 / 10.0,  //
      1.0 / 15.0, 1.0, 1.0 / 10.0,               //
      1.0 / 10.0, 1.0 / 15.0, 1.0;
}

SatelliteOcp::SatelliteOcp(SatelliteParams params) : SatelliteOcp(params, params.horizon, default_box()) {}

SatelliteOcp::SatelliteOcp(SatelliteParams params, double horizon, InitBox box)
    : Ocp(6, 3, horizon, std::move(box)), p_(std::move(params)) {}

InitBox SatelliteOcp::default_box() {
  constexpr double a = std::numbers::pi / 3.0;
  constexpr double w = std::numbers::pi / 4.0;
  InitBox box;
  box.lo = (Vec(6) << -a, -a, -a, -w, -w, -w).finished();
  box.hi = -box.lo;
  return box;
}

Vec SatelliteOcp::dynamics(const Vec& x, const Vec& u) const {
  return satellite_rhs<double>(Eigen::Matrix<double, 6, 1>(x), Eigen::Vector3d(u), p_);
}

Mat SatelliteOcp::dynamics_dx(const Vec& x, const Vec& /*u*/) const {
  const Eigen::Vector3d angles = x.head<3>();
  const Eigen::Vector3d w = x.tail<3>();
  const Eigen::Vector3d jinv = p_.inertia_diag.cwiseInverse();
  Mat d = Mat::Zero(6, 6);
  d.block<3, 1>(0, 0) = kinematics::euler_rate_partial(angles, 0) * w;
  d.block<3, 1>(0, 1) = kinematics::euler_rate_partial(angles, 1) * w;
  d.block<3, 3>(0, 3) = kinematics::euler_rate(angles);
  const Eigen::Matrix3d s = kinematics::wheel_skew(w);
  for (int i = 0; i < 3; ++i) {
    d.block<3, 1>(3, i) = jinv.asDiagonal() * (s * (kinematics::rotation_partial(angles, i) * p_.momentum));
  }
  // S(w) y = y x w, so d/dw = hat(y)
  const Eigen::Vector3d y = kinematics::rotation(angles) * p_.momentum;
  d.block<3, 3>(3, 3) = jinv.asDiagonal() * kinematics::hat(y);
  return d;
}

Mat SatelliteOcp::dynamics_du(const Vec& /*x*/, const Vec& /*u*/) const {
  Mat d = Mat::Zero(6, 3);
  d.bottomRows<3>() = p_.inertia_diag.cwiseInverse().asDiagonal() * p_.wheel_inertia;
  return d;
}

double SatelliteOcp::running_cost(const Vec& x, const Vec& u) const {
  return p_.w_angle * x.head<3>().squaredNorm() + p_.w_rate * x.tail<3>().squaredNorm() +
         p_.w_control * u.squaredNorm();
}

Vec SatelliteOcp::running_cost_dx(const Vec& x, const Vec& /*u*/) const {
  Vec g(6);
  g.head<3>() = 2.0 * p_.w_angle * x.head<3>();
  g.tail<3>() = 2.0 * p_.w_rate * x.tail<3>();
  return g;
}

Vec SatelliteOcp::running_cost_du(const Vec& /*x*/, const Vec& u) const { return 2.0 * p_.w_control * u; }

double SatelliteOcp::terminal_cost(const Vec& x) const {
  return p_.w_angle_final * x.head<3>().squaredNorm() + p_.w_rate_final * x.tail<3>().squaredNorm();
}

Vec SatelliteOcp::terminal_cost_dx(const Vec& x) const {
  Vec g(6);
  g.head<3>() = 2.0 * p_.w_angle_final * x.head<3>();
  g.tail<3>() = 2.0 * p_.w_rate_final * x.tail<3>();
  return g;
}

Vec SatelliteOcp::optimal_control(const Vec& /*x*/, const Vec& lambda) const {
  const Eigen::Vector3d lw = lambda.tail<3>().cwiseQuotient(p_.inertia_diag);
  return (-1.0 / (2.0 * p_.w_control)) * (p_.wheel_inertia.transpose() * lw);
}

OcpPtr SatelliteOcp::with(double horizon, InitBox box) const {
  return std::make_shared<SatelliteOcp>(p_, horizon, std::move(box));
}

// ---------------------------------------------------------------------------

Eigen::Matrix4d QuadrotorParams::mixing() const {
  const double l = arm_length;
  const double c = moment_coeff;
  Eigen::Matrix4d e;
  e << 1, 1, 1, 1,  //
      0, l, 0, -l,  //
      -l, 0, l, 0,  //
      c, -c, c, -c;
  return e;
}

QuadrotorOcp::QuadrotorOcp(double horizon, QuadrotorParams params)
    : QuadrotorOcp(std::move(params), horizon, small_box()) {}

QuadrotorOcp::QuadrotorOcp(QuadrotorParams params, double horizon, InitBox box)
    : Ocp(12, 4, horizon, std::move(box)), p_(std::move(params)) {}

InitBox QuadrotorOcp::full_box() {
  constexpr double pi = std::numbers::pi;
  InitBox box;
  box.lo = (Vec(12) << -40, -40, 20, -1, -1, -1, -pi / 4, -pi / 4, -pi, 0, 0, 0).finished();
  box.hi = (Vec(12) << 40, 40, 40, 1, 1, 1, pi / 4, pi / 4, pi, 0, 0, 0).finished();
  return box;
}

InitBox QuadrotorOcp::small_box() {
  constexpr double pi = std::numbers::pi;
  InitBox box;
  box.lo = (Vec(12) << -8, -8, 4, -0.2, -0.2, -0.2, -pi / 20, -pi / 20, -pi / 5, 0, 0, 0).finished();
  box.hi = (Vec(12) << 8, 8, 8, 0.2, 0.2, 0.2, pi / 20, pi / 20, pi / 5, 0, 0, 0).finished();
  return box;
}

Eigen::Vector4d QuadrotorOcp::rotor_thrusts(const Eigen::Vector4d& u) const {
  return p_.mixing().partialPivLu().solve(u);
}

Vec QuadrotorOcp::dynamics(const Vec& x, const Vec& u) const {
  return quadrotor_rhs<double>(Eigen::Matrix<double, 12, 1>(x), Eigen::Vector4d(u), p_);
}

Mat QuadrotorOcp::dynamics_dx(const Vec& x, const Vec& /*u*/) const {
  using kinematics::hat;
  const Eigen::Vector3d v = x.segment<3>(3);
  const Eigen::Vector3d eta = x.segment<3>(6);
  const Eigen::Vector3d w = x.segment<3>(9);
  const Eigen::Vector3d jdiag = p_.inertia_diag;
  const Eigen::Vector3d g(0.0, 0.0, p_.gravity);
  const Eigen::Matrix3d r = kinematics::rotation(eta);
  Mat d = Mat::Zero(12, 12);
  d.block<3, 3>(0, 3) = r.transpose();
  for (int i = 0; i < 3; ++i) {
    const Eigen::Matrix3d dr = kinematics::rotation_partial(eta, i);
    d.block<3, 1>(0, 6 + i) = dr.transpose() * v;
    d.block<3, 1>(3, 6 + i) = -dr * g;
  }
  d.block<3, 3>(3, 3) = -hat(w);
  d.block<3, 3>(3, 9) = hat(v);
  d.block<3, 1>(6, 6) = kinematics::euler_rate_partial(eta, 0) * w;
  d.block<3, 1>(6, 7) = kinematics::euler_rate_partial(eta, 1) * w;
  d.block<3, 3>(6, 9) = kinematics::euler_rate(eta);
  const Eigen::Matrix3d jmat = jdiag.asDiagonal();
  const Eigen::Vector3d jw = jdiag.cwiseProduct(w);
  d.block<3, 3>(9, 9) = -(jdiag.cwiseInverse().asDiagonal() * (hat(w) * jmat - hat(jw)));
  return d;
}

Mat QuadrotorOcp::dynamics_du(const Vec& /*x*/, const Vec& /*u*/) const {
  Mat d = Mat::Zero(12, 4);
  d(5, 0) = 1.0 / p_.mass;
  d.block<3, 3>(9, 1) = p_.inertia_diag.cwiseInverse().asDiagonal();
  return d;
}

double QuadrotorOcp::running_cost(const Vec& /*x*/, const Vec& u) const {
  const Eigen::Vector4d du = Eigen::Vector4d(u) - p_.hover_control();
  return du.dot(p_.control_weight.cwiseProduct(du));
}

Vec QuadrotorOcp::running_cost_dx(const Vec& /*x*/, const Vec& /*u*/) const { return Vec::Zero(12); }

Vec QuadrotorOcp::running_cost_du(const Vec& /*x*/, const Vec& u) const {
  return 2.0 * p_.control_weight.cwiseProduct(Eigen::Vector4d(u) - p_.hover_control());
}

Vec QuadrotorOcp::final_weights() const {
  Vec q(12);
  q << Vec::Constant(3, p_.w_position_final), Vec::Constant(3, p_.w_velocity_final),
      Vec::Constant(3, p_.w_attitude_final), Vec::Constant(3, p_.w_rate_final);
  return q;
}

double QuadrotorOcp::terminal_cost(const Vec& x) const { return x.dot(final_weights().cwiseProduct(x)); }

Vec QuadrotorOcp::terminal_cost_dx(const Vec& x) const { return 2.0 * final_weights().cwiseProduct(x); }

Vec QuadrotorOcp::optimal_control(const Vec& /*x*/, const Vec& lambda) const {
  Eigen::Vector4d s;
  s[0] = lambda[5] / p_.mass;
  s.tail<3>() = lambda.segment<3>(9).cwiseQuotient(p_.inertia_diag);
  return p_.hover_control() - 0.5 * s.cwiseQuotient(p_.control_weight);
}

OcpPtr QuadrotorOcp::with(double horizon, InitBox box) const {
  return std::make_shared<QuadrotorOcp>(p_, horizon, std::move(box));
}

// ---------------------------------------------------------------------------

ScalarLqOcp::ScalarLqOcp(ScalarLqParams params, double horizon, InitBox box)
    : Ocp(1, 1, horizon, std::move(box)), p_(params) {
  if (!(p_.r > 0.0)) throw ConfigError("scalar LQ problem requires r > 0");
}

Vec ScalarLqOcp::dynamics(const Vec& x, const Vec& u) const { return Vec::Constant(1, p_.a * x[0] + p_.b * u[0]); }
Mat ScalarLqOcp::dynamics_dx(const Vec&, const Vec&) const { return Mat::Constant(1, 1, p_.a); }
Mat ScalarLqOcp::dynamics_du(const Vec&, const Vec&) const { return Mat::Constant(1, 1, p_.b); }
double ScalarLqOcp::running_cost(const Vec& x, const Vec& u) const {
  return p_.q * x[0] * x[0] + p_.r * u[0] * u[0];
}
Vec ScalarLqOcp::running_cost_dx(const Vec& x, const Vec&) const { return Vec::Constant(1, 2.0 * p_.q * x[0]); }
Vec ScalarLqOcp::running_cost_du(const Vec&, const Vec& u) const { return Vec::Constant(1, 2.0 * p_.r * u[0]); }
double ScalarLqOcp::terminal_cost(const Vec& x) const { return p_.terminal * x[0] * x[0]; }
Vec ScalarLqOcp::terminal_cost_dx(const Vec& x) const { return Vec::Constant(1, 2.0 * p_.terminal * x[0]); }
Vec ScalarLqOcp::optimal_control(const Vec&, const Vec& lambda) const {
  return Vec::Constant(1, -p_.b * lambda[0] / (2.0 * p_.r));
}
OcpPtr ScalarLqOcp::with(double horizon, InitBox box) const {
  return std::make_shared<ScalarLqOcp>(p_, horizon, std::move(box));
}

// ---------------------------------------------------------------------------

OcpPtr satellite_ocp() { return std::make_shared<SatelliteOcp>(); }

OcpPtr quadrotor_ocp(double horizon) { return std::make_shared<QuadrotorOcp>(horizon); }

double hamiltonian(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda) {
  return ocp.running_cost(x, u) + lambda.dot(ocp.dynamics(x, u));
}

Vec hamiltonian_du(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda) {
  return ocp.running_cost_du(x, u) + ocp.dynamics_du(x, u).transpose() * lambda;
}

Vec costate_rhs(const Ocp& ocp, const Vec& x, const Vec& u, const Vec& lambda) {
  return -(ocp.dynamics_dx(x, u).transpose() * lambda) - ocp.running_cost_dx(x, u);
}

CostedTrajectory simulate(const Ocp& ocp, const Vec& x0, const Policy& policy, const IntegratorSpec& integ) {
  const Eigen::Index n = ocp.state_dim();
  VectorField field = [&](double t, const Vec& z) {
    const Vec x = z.head(n);
    const Vec u = policy(t, x);
    Vec dz(n + 1);
    dz.head(n) = ocp.dynamics(x, u);
    dz[n] = ocp.running_cost(x, u);
    return dz;
  };
  Vec z0(n + 1);
  z0 << x0, 0.0;
  CostedTrajectory out;
  out.ivp = integrate_ivp(field, z0, 0.0, ocp.horizon(), integ);
  const Vec& zT = out.ivp.final_state();
  out.running = zT[n];
  out.terminal = ocp.terminal_cost(zT.head(n));
  out.total = out.running + out.terminal;
  return out;
}

double total_cost(const Ocp& ocp, const Vec& x0, const Policy& policy, const IntegratorSpec& integ) {
  return simulate(ocp, x0, policy, integ).total;
}

}  // namespace ocnet
