#pragma once

#include "ocnet/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>

namespace ocnet::kinematics {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

/// |pitch| at or beyond this value raises GimbalLock.
inline constexpr double kPitchLimit = std::numbers::pi / 2.0 - 1e-6;

template <typename Scalar>
void check_pitch(const Scalar& theta) {
  using std::abs;
  if (abs(theta) >= Scalar(kPitchLimit)) throw GimbalLock("Euler-angle kinematics singular: |theta| >= pi/2 - 1e-6");
}

/// Earth-to-body direction cosine matrix for roll-pitch-yaw angles (phi, theta, psi).
template <typename Scalar>
Matrix3<Scalar> rotation(const Vector3<Scalar>& angles) {
  using std::cos;
  using std::sin;
  const Scalar sphi = sin(angles[0]), cphi = cos(angles[0]);
  const Scalar sth = sin(angles[1]), cth = cos(angles[1]);
  const Scalar spsi = sin(angles[2]), cpsi = cos(angles[2]);
  Matrix3<Scalar> r;
  r << cth * cpsi, cth * spsi, -sth,                                         //
      sphi * sth * cpsi - cphi * spsi, sphi * sth * spsi + cphi * cpsi, cth * sphi,  //
      cphi * sth * cpsi + sphi * spsi, cphi * sth * spsi - sphi * cpsi, cth * cphi;
  return r;
}

/// Maps body angular rate to Euler-angle rates.
template <typename Scalar>
Matrix3<Scalar> euler_rate(const Vector3<Scalar>& angles) {
  using std::cos;
  using std::sin;
  check_pitch(angles[1]);
  const Scalar sphi = sin(angles[0]), cphi = cos(angles[0]);
  const Scalar cth = cos(angles[1]);
  const Scalar tth = sin(angles[1]) / cth;
  Matrix3<Scalar> e;
  e << Scalar(1), sphi * tth, cphi * tth,  //
      Scalar(0), cphi, -sphi,              //
      Scalar(0), sphi / cth, cphi / cth;
  return e;
}

/// S(w) with S(w) y = y x w.
template <typename Scalar>
Matrix3<Scalar> wheel_skew(const Vector3<Scalar>& w) {
  Matrix3<Scalar> s;
  s << Scalar(0), w[2], -w[1],  //
      -w[2], Scalar(0), w[0],   //
      w[1], -w[0], Scalar(0);
  return s;
}

/// Cross-product matrix: hat(a) b = a x b.
template <typename Scalar>
Matrix3<Scalar> hat(const Vector3<Scalar>& a) {
  Matrix3<Scalar> s;
  s << Scalar(0), -a[2], a[1],  //
      a[2], Scalar(0), -a[0],   //
      -a[1], a[0], Scalar(0);
  return s;
}

/// Partial derivatives of rotation() with respect to each angle.
Matrix3<double> rotation_partial(const Vector3<double>& angles, int which);

/// Partial derivatives of euler_rate() with respect to roll (0) or pitch (1).
Matrix3<double> euler_rate_partial(const Vector3<double>& angles, int which);

}  // namespace ocnet::kinematics
