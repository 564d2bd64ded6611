#include "ocnet/errors.hpp"
#include "ocnet/ocp.hpp"

#include <Eigen/LU>
#include <gtest/gtest.h>
#include <unsupported/Eigen/AutoDiff>

#include <cmath>
#include <numbers>
#include <random>

using namespace ocnet;

namespace {

constexpr double kPi = std::numbers::pi;

Vec uniform_in(const InitBox& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec x(box.dim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * u(rng);
  return x;
}

Vec randn(Eigen::Index n, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> d(0.0, s);
  Vec v(n);
  for (auto& e : v) e = d(rng);
  return v;
}

// Relative error with a floor so near-zero entries compare absolutely.
double rel_err(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

Mat fd_jacobian(const std::function<Vec(const Vec&)>& g, const Vec& x, double eps = 1e-6) {
  const Vec g0 = g(x);
  Mat jac(g0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vec xp = x, xm = x;
    xp[j] += eps;
    xm[j] -= eps;
    jac.col(j) = (g(xp) - g(xm)) / (2 * eps);
  }
  return jac;
}

// A second, independent transcription of the quadrotor equations.
Vec quad_straight_line(const Vec& x, const Vec& u) {
  const double m = 2.0, g = 9.81, jx = 1.2416, jy = 1.2416, jz = 2.4832;
  const double vx = x[3], vy = x[4], vz = x[5];
  const double ph = x[6], th = x[7], ps = x[8];
  const double p = x[9], q = x[10], r = x[11];
  const double cph = std::cos(ph), sph = std::sin(ph), cth = std::cos(th), sth = std::sin(th), cps = std::cos(ps),
               sps = std::sin(ps);
  // R rows
  const double r11 = cth * cps, r12 = cth * sps, r13 = -sth;
  const double r21 = sph * sth * cps - cph * sps, r22 = sph * sth * sps + cph * cps, r23 = sph * cth;
  const double r31 = cph * sth * cps + sph * sps, r32 = cph * sth * sps - sph * cps, r33 = cph * cth;
  Vec d(12);
  d[0] = r11 * vx + r21 * vy + r31 * vz;
  d[1] = r12 * vx + r22 * vy + r32 * vz;
  d[2] = r13 * vx + r23 * vy + r33 * vz;
  d[3] = -(q * vz - r * vy) - r13 * g;
  d[4] = -(r * vx - p * vz) - r23 * g;
  d[5] = -(p * vy - q * vx) - r33 * g + u[0] / m;
  d[6] = p + sph * std::tan(th) * q + cph * std::tan(th) * r;
  d[7] = cph * q - sph * r;
  d[8] = (sph * q + cph * r) / cth;
  d[9] = (u[1] - (q * jz * r - r * jy * q)) / jx;
  d[10] = (u[2] - (r * jx * p - p * jz * r)) / jy;
  d[11] = (u[3] - (p * jy * q - q * jx * p)) / jz;
  return d;
}

struct Sampler {
  const Ocp& ocp;
  std::mt19937_64 rng{12345};
  InitBox box;
  explicit Sampler(const Ocp& o) : ocp(o), box(o.init_box()) {
    // widen pinned dimensions so every derivative is exercised
    for (Eigen::Index i = 0; i < box.dim(); ++i) {
      if (box.lo[i] == box.hi[i]) {
        box.lo[i] = -0.5;
        box.hi[i] = 0.5;
      }
    }
  }
  Vec x() { return uniform_in(box, rng); }
  Vec u() { return randn(ocp.control_dim(), rng, 2.0); }
  Vec lambda() { return randn(ocp.state_dim(), rng); }
};

void check_jacobians(const Ocp& ocp) {
  Sampler s(ocp);
  for (int k = 0; k < 100; ++k) {
    const Vec x = s.x(), u = s.u();
    EXPECT_LE(rel_err(ocp.dynamics_dx(x, u), fd_jacobian([&](const Vec& y) { return ocp.dynamics(y, u); }, x)), 1e-5);
    EXPECT_LE(rel_err(ocp.dynamics_du(x, u), fd_jacobian([&](const Vec& v) { return ocp.dynamics(x, v); }, u)), 1e-5);
    const auto lscalar = [&](const Vec& y) { return Vec::Constant(1, ocp.running_cost(y, u)); };
    EXPECT_LE(rel_err(ocp.running_cost_dx(x, u).transpose(), fd_jacobian(lscalar, x)), 1e-5);
    const auto luscalar = [&](const Vec& v) { return Vec::Constant(1, ocp.running_cost(x, v)); };
    EXPECT_LE(rel_err(ocp.running_cost_du(x, u).transpose(), fd_jacobian(luscalar, u)), 1e-5);
    const auto mscalar = [&](const Vec& y) { return Vec::Constant(1, ocp.terminal_cost(y)); };
    EXPECT_LE(rel_err(ocp.terminal_cost_dx(x).transpose(), fd_jacobian(mscalar, x)), 1e-5);
    EXPECT_GE(ocp.running_cost(x, u), 0.0);
    EXPECT_GE(ocp.terminal_cost(x), 0.0);
  }
}

void check_stationarity(const Ocp& ocp) {
  Sampler s(ocp);
  for (int k = 0; k < 100; ++k) {
    const Vec x = s.x(), lam = s.lambda();
    const Vec u = ocp.optimal_control(x, lam);
    EXPECT_LE(hamiltonian_du(ocp, x, u, lam).norm(), 1e-10);
    EXPECT_LT(hamiltonian(ocp, x, u, lam), hamiltonian(ocp, x, u + 0.01 * s.u(), lam));
  }
}

}  // namespace

TEST(Satellite, HandValues) {
  SatelliteOcp sat;
  Vec x = Vec::Zero(6);
  x[3] = 0.1;
  const Vec f = sat.dynamics(x, Vec::Zero(3));
  EXPECT_NEAR(f[0], 0.1, 1e-15);
  EXPECT_NEAR(f[1], 0.0, 1e-15);
  EXPECT_NEAR(f[2], 0.0, 1e-15);
  EXPECT_NEAR(f[3], 0.0, 1e-15);
  EXPECT_NEAR(f[4], 0.1 / 3.0, 1e-15);
  EXPECT_NEAR(f[5], -0.1 / 4.0, 1e-15);
}

TEST(Satellite, IndependentMatrixEvaluation) {
  // S(w) R h + B u divided by J, assembled by hand at a generic point
  SatelliteOcp sat;
  const double phi = 0.3, th = -0.2, psi = 0.7;
  const Eigen::Vector3d w(0.1, -0.4, 0.25), u(0.5, -1.0, 2.0);
  Eigen::Matrix3d r1, r2, r3;
  r1 << 1, 0, 0, 0, std::cos(phi), std::sin(phi), 0, -std::sin(phi), std::cos(phi);
  r2 << std::cos(th), 0, -std::sin(th), 0, 1, 0, std::sin(th), 0, std::cos(th);
  r3 << std::cos(psi), std::sin(psi), 0, -std::sin(psi), std::cos(psi), 0, 0, 0, 1;
  const Eigen::Vector3d y = r1 * r2 * r3 * Eigen::Vector3d::Ones();
  const Eigen::Vector3d cross = y.cross(w);
  Eigen::Matrix3d b;
  b << 1, 0.05, 0.1, 1.0 / 15, 1, 0.1, 0.1, 1.0 / 15, 1;
  const Eigen::Vector3d wdot = (cross + b * u).cwiseQuotient(Eigen::Vector3d(2, 3, 4));
  Vec x(6);
  x << phi, th, psi, w;
  const Vec f = sat.dynamics(x, u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(f[3 + i], wdot[i], 1e-14);
  EXPECT_NEAR(f[0], w[0] + std::sin(phi) * std::tan(th) * w[1] + std::cos(phi) * std::tan(th) * w[2], 1e-14);
  EXPECT_NEAR(f[2], (std::sin(phi) * w[1] + std::cos(phi) * w[2]) / std::cos(th), 1e-14);
}

TEST(Satellite, Equilibria) {
  SatelliteOcp sat;
  std::mt19937_64 rng(7);
  for (int k = 0; k < 50; ++k) {
    Vec x = uniform_in(sat.init_box(), rng);
    x.tail<3>().setZero();
    EXPECT_EQ(sat.dynamics(x, Vec::Zero(3)).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_TRUE(kinematics::euler_rate(Eigen::Vector3d::Zero().eval()).isIdentity(0.0));
  EXPECT_TRUE(kinematics::rotation(Eigen::Vector3d::Zero().eval()).isIdentity(0.0));
}

TEST(Satellite, OptimalControlHandValue) {
  SatelliteOcp sat;
  Vec lam(6);
  lam << 0.3, -2.0, 5.0, 1.0, 0.0, 0.0;
  const Vec u = sat.optimal_control(Vec::Zero(6), lam);
  EXPECT_NEAR(u[0], -1.0, 1e-15);
  EXPECT_NEAR(u[1], -0.05, 1e-15);
  EXPECT_NEAR(u[2], -0.1, 1e-15);
  EXPECT_LE(hamiltonian_du(sat, Vec::Zero(6), u, lam).norm(), 1e-12);
  EXPECT_EQ(sat.optimal_control(Vec::Zero(6), Vec::Zero(6)).norm(), 0.0);
}

TEST(Satellite, Jacobians) { check_jacobians(SatelliteOcp()); }
TEST(Satellite, Stationarity) { check_stationarity(SatelliteOcp()); }

TEST(Satellite, AutoDiffMatchesAnalytic) {
  using AD = Eigen::AutoDiffScalar<Eigen::Matrix<double, 9, 1>>;
  SatelliteOcp sat;
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    const Vec x = uniform_in(sat.init_box(), rng);
    const Vec u = randn(3, rng);
    Eigen::Matrix<AD, 6, 1> xa;
    Eigen::Matrix<AD, 3, 1> ua;
    for (int i = 0; i < 6; ++i) xa[i] = AD(x[i], 9, i);
    for (int i = 0; i < 3; ++i) ua[i] = AD(u[i], 9, 6 + i);
    const auto fa = satellite_rhs<AD>(xa, ua, sat.params());
    Mat jac(6, 9);
    for (int i = 0; i < 6; ++i) jac.row(i) = fa[i].derivatives().transpose();
    EXPECT_LE(rel_err(sat.dynamics_dx(x, u), jac.leftCols(6)), 1e-13);
    EXPECT_LE(rel_err(sat.dynamics_du(x, u), jac.rightCols(3)), 1e-13);
  }
}

TEST(Satellite, GimbalLock) {
  SatelliteOcp sat;
  Vec x = Vec::Zero(6);
  x[1] = kPi / 2.0;
  EXPECT_THROW(sat.dynamics(x, Vec::Zero(3)), GimbalLock);
  x[1] = -(kPi / 2.0 - 5e-7);
  EXPECT_THROW(sat.dynamics(x, Vec::Zero(3)), GimbalLock);
  x[1] = kPi / 2.0 - 2e-6;
  EXPECT_NO_THROW(sat.dynamics(x, Vec::Zero(3)));
}

TEST(Kinematics, RotationsOrthonormal) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> a(-kPi, kPi);
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Vector3d v(a(rng), a(rng) / 2.0, a(rng));
    const Eigen::Matrix3d r = kinematics::rotation(v);
    EXPECT_LE((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  }
}

TEST(Quadrotor, Hover) {
  QuadrotorOcp quad(8.0);
  std::mt19937_64 rng(5);
  const Vec ud = quad.params().hover_control();
  EXPECT_NEAR(ud[0], 19.62, 1e-12);
  for (int k = 0; k < 20; ++k) {
    Vec x = Vec::Zero(12);
    x.head<3>() = randn(3, rng, 10.0);
    EXPECT_LE(quad.dynamics(x, ud).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(quad.running_cost(x, ud), 0.0);
  }
  EXPECT_EQ(quad.terminal_cost(Vec::Zero(12)), 0.0);
  for (int i = 0; i < 12; ++i) EXPECT_GT(quad.terminal_cost(Vec::Unit(12, i) * 1e-3), 0.0);
  EXPECT_EQ((quad.optimal_control(Vec::Zero(12), Vec::Zero(12)) - ud).norm(), 0.0);
}

TEST(Quadrotor, MatchesStraightLineTranscription) {
  QuadrotorOcp quad(8.0);
  Sampler s(quad);
  for (int k = 0; k < 100; ++k) {
    const Vec x = s.x(), u = s.u();
    EXPECT_LE((quad.dynamics(x, u) - quad_straight_line(x, u)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Quadrotor, Jacobians) { check_jacobians(QuadrotorOcp(8.0)); }
TEST(Quadrotor, Stationarity) { check_stationarity(QuadrotorOcp(8.0)); }

TEST(Quadrotor, RotorThrustsInvertMixing) {
  QuadrotorOcp quad(4.0);
  const Eigen::Vector4d u(20.0, 0.3, -0.2, 0.05);
  EXPECT_LE((quad.params().mixing() * quad.rotor_thrusts(u) - u).norm(), 1e-12);
  const Eigen::Vector4d hover = quad.rotor_thrusts(quad.params().hover_control());
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(hover[i], 19.62 / 4.0, 1e-12);
}

TEST(Quadrotor, Boxes) {
  const InitBox full = QuadrotorOcp::full_box();
  const InitBox small = QuadrotorOcp::small_box();
  EXPECT_EQ(full.hi[8], kPi);
  EXPECT_EQ(small.lo[2], 4.0);
  for (int i = 9; i < 12; ++i) {
    EXPECT_EQ(full.lo[i], 0.0);
    EXPECT_EQ(full.hi[i], 0.0);
  }
  EXPECT_NO_THROW(full.validate());
  InitBox bad = small;
  bad.lo[0] = 100.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Hamiltonian, Basics) {
  ScalarLqOcp lq({}, 1.0);
  const Vec one = Vec::Ones(1);
  EXPECT_DOUBLE_EQ(hamiltonian(lq, one, one, Vec::Constant(1, 2.0)), 4.0);
  EXPECT_DOUBLE_EQ(hamiltonian(lq, one, one, Vec::Zero(1)), 2.0);
  EXPECT_DOUBLE_EQ(costate_rhs(lq, one, Vec::Constant(1, 0.3), Vec::Constant(1, 7.0))[0], -2.0);
  SatelliteOcp sat;
  std::mt19937_64 rng(1);
  EXPECT_EQ(hamiltonian(sat, Vec::Zero(6), Vec::Zero(3), randn(6, rng)), 0.0);
  EXPECT_EQ(costate_rhs(sat, Vec::Zero(6), Vec::Zero(3), Vec::Zero(6)).norm(), 0.0);
}

TEST(Hamiltonian, CostateMatchesFiniteDifference) {
  SatelliteOcp sat;
  Sampler s(sat);
  for (int k = 0; k < 20; ++k) {
    const Vec x = s.x(), u = s.u(), lam = s.lambda();
    const auto h = [&](const Vec& y) { return Vec::Constant(1, hamiltonian(sat, y, u, lam)); };
    const Vec fd = -fd_jacobian(h, x).transpose();
    EXPECT_LE(rel_err(costate_rhs(sat, x, u, lam), fd), 1e-5);
  }
}

TEST(TotalCost, Simple) {
  IntegratorSpec integ;
  SatelliteOcp sat;
  const Policy zero3 = [](double, const Vec&) -> Vec { return Vec::Zero(3); };
  EXPECT_EQ(total_cost(sat, Vec::Zero(6), zero3, integ), 0.0);

  ScalarLqParams p;
  p.q = 0.0;
  p.terminal = 1.0;
  ScalarLqOcp lq(p, 1.0);
  const Policy zero1 = [](double, const Vec&) -> Vec { return Vec::Zero(1); };
  EXPECT_DOUBLE_EQ(total_cost(lq, Vec::Ones(1), zero1, integ), 1.0);
}

TEST(TotalCost, ScalarLqrUnderRiccatiFeedback) {
  ScalarLqOcp lq({}, 1.0);
  IntegratorSpec integ;
  integ.abs_tol = integ.rel_tol = 1e-10;
  const Policy opt = [](double t, const Vec& x) -> Vec { return Vec::Constant(1, -std::tanh(1.0 - t) * x[0]); };
  EXPECT_NEAR(total_cost(lq, Vec::Ones(1), opt, integ), std::tanh(1.0), 1e-8);
}
