#include "ocnet/openloop.hpp"

#include "ocnet/errors.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ocnet {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// y = (x, lambda, accumulated running cost) under u = u*(x, lambda).
VectorField pmp_field(const Ocp& ocp) {
  const int n = ocp.state_dim();
  return [&ocp, n](double, const Vec& y) -> Vec {
    const Vec x = y.head(n);
    const Vec lam = y.segment(n, n);
    const Vec u = ocp.optimal_control(x, lam);
    Vec dy(2 * n + 1);
    dy.head(n) = ocp.dynamics(x, u);
    dy.segment(n, n) = costate_rhs(ocp, x, u, lam);
    dy[2 * n] = ocp.running_cost(x, u);
    return dy;
  };
}

class Shooter {
 public:
  Shooter(const Ocp& ocp, const Vec& x0, const ShootingSpec& spec, const IntegratorSpec& integ)
      : ocp_(ocp), x0_(x0), spec_(spec), integ_(integ), n_(ocp.state_dim()), field_(pmp_field(ocp)) {
    const double T = ocp.horizon();
    const double k = std::ceil(T / spec.segment_length - 1e-9);
    segments_ = std::max(1, static_cast<int>(k));
    tau_.resize(static_cast<std::size_t>(segments_) + 1);
    for (int i = 0; i <= segments_; ++i) tau_[static_cast<std::size_t>(i)] = T * i / segments_;
    tau_.back() = T;
  }

  int unknowns() const { return n_ + 2 * n_ * (segments_ - 1); }
  int segments() const { return segments_; }
  const std::vector<double>& tau() const { return tau_; }

  Vec pack(const ShootingGuess& guess) const {
    Vec z(unknowns());
    if (guess.lambda0.size() != n_) throw ConfigError("costate guess has the wrong dimension");
    z.head(n_) = guess.lambda0;
    if (segments_ == 1) return z;
    if (guess.profile) {
      for (int k = 1; k < segments_; ++k) z.segment(node_offset(k), 2 * n_) = guess.profile(tau_[k]);
      return z;
    }
    // Cold start: state decays linearly from x0 to the origin, costate zero.
    for (int k = 1; k < segments_; ++k) {
      z.segment(node_offset(k), n_) = (1.0 - tau_[k] / tau_.back()) * x0_;
      z.segment(node_offset(k) + n_, n_).setZero();
    }
    return z;
  }

  Vec segment_start(const Vec& z, int k) const {
    Vec y(2 * n_ + 1);
    if (k == 0) {
      y << x0_, z.head(n_), 0.0;
    } else {
      y << z.segment(node_offset(k), 2 * n_), 0.0;
    }
    return y;
  }

  std::vector<IvpResult> integrate(const Vec& z) const {
    std::vector<IvpResult> segs;
    segs.reserve(static_cast<std::size_t>(segments_));
    for (int k = 0; k < segments_; ++k) {
      segs.push_back(integrate_ivp(field_, segment_start(z, k), tau_[k], tau_[k + 1], integ_));
    }
    return segs;
  }

  Vec terminal_defect(const Vec& y_end) const {
    return y_end.segment(n_, n_) - ocp_.terminal_cost_dx(y_end.head(n_));
  }

  Vec residual(const Vec& z, const std::vector<IvpResult>& segs) const {
    Vec r(unknowns());
    for (int k = 0; k + 1 < segments_; ++k) {
      r.segment(2 * n_ * k, 2 * n_) =
          segs[static_cast<std::size_t>(k)].final_state().head(2 * n_) - z.segment(node_offset(k + 1), 2 * n_);
    }
    r.tail(n_) = terminal_defect(segs.back().final_state());
    return r;
  }

  // Forward differences of each segment's end map, re-running that segment's
  // accepted steps so the map is smooth in its start values.
  Mat jacobian(const Vec& z, const std::vector<IvpResult>& segs) const {
    const int N = unknowns();
    Mat jac = Mat::Zero(N, N);
    const Scheme scheme = integ_.scheme;
    for (int k = 0; k < segments_; ++k) {
      const IvpResult& seg = segs[static_cast<std::size_t>(k)];
      const bool last = k + 1 == segments_;
      const auto out = [&](const Vec& y_end) -> Vec {
        return last ? terminal_defect(y_end) : Vec(y_end.head(2 * n_));
      };
      const Vec y0 = segment_start(z, k);
      const Vec base = out(seg.final_state());
      const int row = 2 * n_ * k;
      const int first = k == 0 ? n_ : 0;  // x0 is fixed
      const int col0 = k == 0 ? 0 : node_offset(k);
      for (int j = first; j < 2 * n_; ++j) {
        Vec yp = y0;
        const double eps = spec_.fd_eps * std::max(1.0, std::abs(y0[j]));
        yp[j] += eps;
        const Vec end = replay_fixed(field_, yp, seg.step_records, scheme).back();
        jac.block(row, col0 + (j - first), base.size(), 1) = (out(end) - base) / eps;
      }
      if (!last) jac.block(row, node_offset(k + 1), 2 * n_, 2 * n_) -= Mat::Identity(2 * n_, 2 * n_);
    }
    return jac;
  }

  OpenLoopSolution assemble(const Vec& z, const std::vector<IvpResult>& segs, const Vec& r, int iters) const {
    OpenLoopSolution sol;
    IvpResult& traj = sol.trajectory;
    traj.scheme = integ_.scheme;
    traj.grid.t0 = tau_.front();
    traj.grid.t1 = tau_.back();
    double offset = 0.0;
    for (std::size_t k = 0; k < segs.size(); ++k) {
      const IvpResult& seg = segs[k];
      for (std::size_t i = (k == 0 ? 0 : 1); i < seg.states.size(); ++i) {
        Vec y = seg.states[i];
        y[2 * n_] += offset;
        traj.grid.nodes.push_back(seg.grid.nodes[i]);
        traj.states.push_back(std::move(y));
        traj.derivatives.push_back(seg.derivatives[i]);
      }
      for (StepRecord rec : seg.step_records) {
        rec.x[2 * n_] += offset;
        traj.step_records.push_back(std::move(rec));
      }
      traj.n_rejected += seg.n_rejected;
      traj.n_evaluations += seg.n_evaluations;
      offset += seg.final_state()[2 * n_];
    }
    sol.grid = traj.grid;
    for (const Vec& y : traj.states) {
      sol.states.push_back(y.head(n_));
      sol.costates.push_back(y.segment(n_, n_));
      sol.controls.push_back(ocp_.optimal_control(sol.states.back(), sol.costates.back()));
    }
    const Vec& yT = segs.back().final_state();
    sol.total_cost = offset + ocp_.terminal_cost(yT.head(n_));
    sol.residual = r.norm();
    sol.terminal_residual = r.tail(n_).norm();
    sol.converged = sol.residual <= spec_.residual_tol;
    sol.newton_iters = iters;
    for (int k = 0; k < segments_; ++k) {
      sol.node_times.push_back(tau_[k]);
      sol.node_values.push_back(segment_start(z, k).head(2 * n_));
    }
    sol.node_times.push_back(tau_.back());
    sol.node_values.push_back(yT.head(2 * n_));
    return sol;
  }

 private:
  int node_offset(int k) const { return n_ + 2 * n_ * (k - 1); }

  const Ocp& ocp_;
  Vec x0_;
  ShootingSpec spec_;
  IntegratorSpec integ_;
  int n_;
  VectorField field_;
  int segments_ = 1;
  std::vector<double> tau_;
};

}  // namespace

void ShootingSpec::validate() const {
  if (!(residual_tol > 0.0)) throw ConfigError("shooting residual_tol must be > 0");
  if (max_newton_iters < 1) throw ConfigError("shooting max_newton_iters must be >= 1");
  if (!(fd_eps > 0.0)) throw ConfigError("shooting fd_eps must be > 0");
  if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("shooting damping must lie in (0, 1]");
  if (max_halvings < 0) throw ConfigError("shooting max_halvings must be >= 0");
  if (!(segment_length > 0.0)) throw ConfigError("shooting segment_length must be > 0");
}

IntegratorSpec bvp_integrator() {
  IntegratorSpec s;
  s.abs_tol = 1e-10;
  s.rel_tol = 1e-10;
  return s;
}

PmpPoint sample_solution(const Ocp& ocp, const OpenLoopSolution& sol, double t) {
  const int n = ocp.state_dim();
  const Vec y = dense_sample(sol.trajectory, t);
  PmpPoint p{y.head(n), y.segment(n, n), Vec()};
  p.u = ocp.optimal_control(p.x, p.lambda);
  return p;
}

OpenLoopSolution solve_shooting(const Ocp& ocp, const Vec& x0, const Vec& lambda0_guess, const ShootingSpec& spec,
                                const IntegratorSpec& integ) {
  return solve_shooting(ocp, x0, ShootingGuess{lambda0_guess, {}}, spec, integ);
}

OpenLoopSolution solve_shooting(const Ocp& ocp, const Vec& x0, const ShootingGuess& guess, const ShootingSpec& spec,
                                const IntegratorSpec& integ) {
  spec.validate();
  integ.validate();
  if (x0.size() != ocp.state_dim()) throw ConfigError("initial state has the wrong dimension");
  if (!x0.allFinite() || !guess.lambda0.allFinite()) throw NonFiniteState("non-finite shooting input");

  Shooter sh(ocp, x0, spec, integ);
  Vec z = sh.pack(guess);
  std::vector<IvpResult> segs = sh.integrate(z);
  Vec r = sh.residual(z, segs);
  double norm = r.norm();
  int iters = 0;
  while (!(norm <= spec.residual_tol)) {
    if (iters >= spec.max_newton_iters) {
      throw NewtonDiverged("shooting residual " + std::to_string(norm) + " after " + std::to_string(iters) +
                           " Newton iterations");
    }
    const Mat jac = sh.jacobian(z, segs);
    const Eigen::PartialPivLU<Mat> lu(jac);
    const Vec dz = lu.solve(-r);
    if (!dz.allFinite()) throw NewtonDiverged("singular shooting Jacobian");
    const double dz_norm = dz.norm();
    double alpha = spec.damping;
    bool accepted = false;
    for (int h = 0; h <= spec.max_halvings; ++h, alpha *= 0.5) {
      const Vec zt = z + alpha * dz;
      try {
        std::vector<IvpResult> st = sh.integrate(zt);
        Vec rt = sh.residual(zt, st);
        const double nt = rt.allFinite() ? rt.norm() : kInf;
        // natural monotonicity: the simplified Newton correction must shrink
        const bool natural = std::isfinite(nt) && lu.solve(-rt).norm() <= (1.0 - 0.25 * alpha) * dz_norm;
        if (nt < norm || natural) {
          z = zt;
          segs = std::move(st);
          r = std::move(rt);
          norm = nt;
          accepted = true;
          break;
        }
      } catch (const Error&) {
        // trial left the domain; shrink the step
      }
    }
    if (!accepted) {
      throw NewtonDiverged("line search failed to reduce shooting residual " + std::to_string(norm));
    }
    ++iters;
  }
  return sh.assemble(z, segs, r, iters);
}

double shooting_residual(const Ocp& ocp, const Vec& x0, const ShootingGuess& guess, const ShootingSpec& spec,
                         const IntegratorSpec& integ) {
  Shooter sh(ocp, x0, spec, integ);
  try {
    const Vec z = sh.pack(guess);
    const Vec r = sh.residual(z, sh.integrate(z));
    return r.allFinite() ? r.norm() : kInf;
  } catch (const Error&) {
    return kInf;
  }
}

void ContinuationSchedule::validate() const {
  if (stages.empty()) throw ConfigError("continuation schedule needs at least one stage");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (!(stages[i] > 0.0 && stages[i] <= 1.0)) throw ConfigError("continuation stages must lie in (0, 1]");
    if (i > 0 && !(stages[i] > stages[i - 1])) throw ConfigError("continuation stages must be strictly increasing");
  }
  if (stages.back() != 1.0) throw ConfigError("last continuation stage must be 1.0");
}

ContinuationSchedule ContinuationSchedule::time_marching(std::vector<double> stages) {
  return {MarchKind::TimeMarching, std::move(stages)};
}

ContinuationSchedule ContinuationSchedule::space_marching(std::vector<double> stages) {
  return {MarchKind::SpaceMarching, std::move(stages)};
}

ContinuationSchedule ContinuationSchedule::default_for(const Ocp& ocp) {
  if (ocp.name() == "quadrotor") return space_marching({0.2, 0.4, 0.6, 0.8, 1.0});
  return time_marching({0.125, 0.25, 0.5, 1.0});
}

ShootingGuess continuation_guess(const ContinuationSchedule& schedule, const OpenLoopSolution& prev, double prev_stage,
                                 double next_stage) {
  const IvpResult* traj = &prev.trajectory;
  const Eigen::Index n2 = prev.node_values.front().size();
  ShootingGuess g;
  if (schedule.kind == MarchKind::TimeMarching) {
    const double t_end = traj->grid.t1;
    const Vec tail = prev.node_values.back();
    g.profile = [traj, n2, t_end, tail](double t) -> Vec {
      if (t >= t_end) return tail;
      return dense_sample(*traj, t).head(n2);
    };
  } else {
    const double ratio = next_stage / prev_stage;
    g.profile = [traj, n2, ratio](double t) -> Vec { return ratio * dense_sample(*traj, t).head(n2); };
  }
  g.lambda0 = g.profile(0.0).tail(n2 / 2);
  return g;
}

OpenLoopSolution solve_with_continuation(const Ocp& ocp, const Vec& x0, const ContinuationSchedule& schedule,
                                         const ShootingSpec& spec, const IntegratorSpec& integ) {
  schedule.validate();
  OpenLoopSolution prev;
  for (std::size_t i = 0; i < schedule.stages.size(); ++i) {
    const double s = schedule.stages[i];
    OcpPtr staged;
    const Ocp* stage_ocp = &ocp;
    Vec stage_x0 = x0;
    if (schedule.kind == MarchKind::TimeMarching) {
      if (s != 1.0) {
        staged = ocp.with_horizon(s * ocp.horizon());
        stage_ocp = staged.get();
      }
    } else {
      stage_x0 = s * x0;
    }
    const ShootingGuess guess = i == 0 ? ShootingGuess{Vec::Zero(ocp.state_dim()), {}}
                                       : continuation_guess(schedule, prev, schedule.stages[i - 1], s);
    try {
      prev = solve_shooting(*stage_ocp, stage_x0, guess, spec, integ);
    } catch (const ContinuationFailed&) {
      throw;
    } catch (const Error& e) {
      throw ContinuationFailed(i, e.what());
    }
  }
  return prev;
}

double LqrOracle::p(double t) const {
  const double s = std::clamp(horizon - t, 0.0, horizon);
  return dense_sample(riccati, s)[0];
}

double LqrOracle::control(double t) const {
  return feedback(t, dense_sample(state, std::clamp(t, 0.0, horizon))[0]);
}

LqrOracle lqr_oracle(double a, double b, double q, double r, double mT, double T, double x0) {
  if (!(r > 0.0) || q < 0.0 || mT < 0.0) throw ConfigError("lqr_oracle requires r > 0, q >= 0, mT >= 0");
  if (!(T > 0.0)) throw ConfigError("lqr_oracle requires T > 0");
  IntegratorSpec tight;
  tight.abs_tol = 1e-13;
  tight.rel_tol = 1e-13;
  LqrOracle o;
  o.horizon = T;
  o.a = a;
  o.b = b;
  o.r = r;
  // s = T - t: dP/ds = 2aP - P^2 b^2 / r + q
  const VectorField ric = [a, b, q, r](double, const Vec& p) -> Vec {
    return Vec::Constant(1, 2.0 * a * p[0] - p[0] * p[0] * b * b / r + q);
  };
  o.riccati = integrate_ivp(ric, Vec::Constant(1, mT), 0.0, T, tight);
  const IvpResult& ricc = o.riccati;
  const VectorField closed = [&ricc, a, b, r, T](double t, const Vec& x) -> Vec {
    const double pt = dense_sample(ricc, std::clamp(T - t, 0.0, T))[0];
    return Vec::Constant(1, (a - b * b * pt / r) * x[0]);
  };
  o.state = integrate_ivp(closed, Vec::Constant(1, x0), 0.0, T, tight);
  o.cost = o.riccati.final_state()[0] * x0 * x0;
  return o;
}

}  // namespace ocnet
