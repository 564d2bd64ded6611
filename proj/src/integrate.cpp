#include "ocnet/integrate.hpp"

#include "ocnet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ocnet {
namespace {

Tableau make_dopri54() {
  Tableau t;
  t.stages = 7;
  t.error_order = 4;
  t.adaptive = true;
  t.fsal = true;
  t.c = {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0};
  t.a = {
      {},
      {1.0 / 5.0},
      {3.0 / 40.0, 9.0 / 40.0},
      {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0},
      {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0},
      {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0},
      {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0},
  };
  t.b = {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0};
  t.e = {71.0 / 57600.0,      0.0,          -71.0 / 16695.0, 71.0 / 1920.0,
         -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0};
  return t;
}

Tableau make_bs23() {
  Tableau t;
  t.stages = 4;
  t.error_order = 2;
  t.adaptive = true;
  t.fsal = true;
  t.c = {0.0, 1.0 / 2.0, 3.0 / 4.0, 1.0};
  t.a = {{}, {1.0 / 2.0}, {0.0, 3.0 / 4.0}, {2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0}};
  t.b = {2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0};
  t.e = {-5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0};
  return t;
}

Tableau make_rk4() {
  Tableau t;
  t.stages = 4;
  t.error_order = 4;
  t.c = {0.0, 0.5, 0.5, 1.0};
  t.a = {{}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}};
  t.b = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};
  return t;
}

bool all_finite(const Vec& v) { return v.allFinite(); }

// Componentwise max of |err_i| / (atol + rtol * max(|x_i|, |y_i|)).
double error_norm(const Vec& err, const Vec& x, const Vec& y, double atol, double rtol) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double scale = atol + rtol * std::max(std::abs(x[i]), std::abs(y[i]));
    worst = std::max(worst, std::abs(err[i]) / scale);
  }
  return worst;
}

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 5.0;
constexpr double kPiBeta = 0.04;

}  // namespace

void IntegratorSpec::validate() const {
  if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) throw ConfigError("integrator tolerances must be > 0");
  if (max_steps < 1) throw ConfigError("integrator max_steps must be >= 1");
  if (initial_step && !(*initial_step > 0.0)) throw ConfigError("integrator initial_step must be > 0");
}

const Tableau& tableau(Scheme scheme) {
  static const Tableau dp = make_dopri54();
  static const Tableau bs = make_bs23();
  static const Tableau rk = make_rk4();
  switch (scheme) {
    case Scheme::DormandPrince54:
      return dp;
    case Scheme::BogackiShampine23:
      return bs;
    case Scheme::FixedRK4:
      return rk;
  }
  return dp;
}

Vec rk_step(const Tableau& tab, const VectorField& f, double t, const Vec& x, double h, const Vec* k1,
            StageTrace* trace, Vec* error, Vec* k_last) {
  const int s = tab.stages;
  std::vector<Vec> k(static_cast<std::size_t>(s));
  if (trace) trace->inputs.assign(static_cast<std::size_t>(s), Vec());
  k[0] = k1 ? *k1 : f(t, x);
  if (trace) trace->inputs[0] = x;
  Vec y;
  for (int i = 1; i < s; ++i) {
    y = x;
    const auto& row = tab.a[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] != 0.0) y += (h * row[j]) * k[j];
    }
    k[static_cast<std::size_t>(i)] = f(t + tab.c[static_cast<std::size_t>(i)] * h, y);
    if (trace) trace->inputs[static_cast<std::size_t>(i)] = y;
  }
  Vec x_next;
  if (tab.fsal) {
    x_next = y;
  } else {
    x_next = x;
    for (int j = 0; j < s; ++j) {
      const double bj = tab.b[static_cast<std::size_t>(j)];
      if (bj != 0.0) x_next += (h * bj) * k[static_cast<std::size_t>(j)];
    }
  }
  if (error && !tab.e.empty()) {
    error->setZero(x.size());
    for (int j = 0; j < s; ++j) {
      const double ej = tab.e[static_cast<std::size_t>(j)];
      if (ej != 0.0) *error += (h * ej) * k[static_cast<std::size_t>(j)];
    }
  }
  if (k_last && tab.fsal) *k_last = k.back();
  if (trace) trace->slopes = std::move(k);
  return x_next;
}

double exact_step(double t, double t_next) {
  double h = t_next - t;
  for (int i = 0; i < 8 && t + h < t_next; ++i) h = std::nextafter(h, std::numeric_limits<double>::infinity());
  for (int i = 0; i < 8 && t + h > t_next; ++i) h = std::nextafter(h, 0.0);
  return h;
}

IvpResult integrate_ivp(const VectorField& f, const Vec& x0, double t0, double t1, const IntegratorSpec& spec) {
  spec.validate();
  if (!(t1 > t0)) throw OutOfSpan("integrate_ivp requires t1 > t0");
  if (!all_finite(x0)) throw NonFiniteState("non-finite initial state");

  const Tableau& tab = tableau(spec.scheme);
  IvpResult out;
  out.scheme = spec.scheme;
  out.grid.t0 = t0;
  out.grid.t1 = t1;
  out.grid.nodes.push_back(t0);
  out.states.push_back(x0);

  Vec k1 = f(t0, x0);
  ++out.n_evaluations;
  if (!all_finite(k1)) throw NonFiniteState("non-finite derivative at t=" + std::to_string(t0));
  out.derivatives.push_back(k1);

  const double span = t1 - t0;
  double h = spec.initial_step.value_or(span / 100.0);
  double t = t0;
  Vec x = x0;
  double err_prev = 1e-4;
  bool rejected_last = false;
  Vec err;
  Vec k_last;

  while (true) {
    if (out.step_records.size() >= spec.max_steps) {
      throw StepLimitExceeded("integrate_ivp: exceeded " + std::to_string(spec.max_steps) + " steps");
    }
    double t_next = t + h;
    const bool last = t_next >= t1 || (t1 - t_next) <= 1e-12 * span;
    if (last) t_next = t1;
    double h_eff = exact_step(t, t_next);
    if (t + h_eff != t_next) t_next = t + h_eff;
    if (!(h_eff > 0.0) || h_eff <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(t)) {
      throw StepLimitExceeded("integrate_ivp: step size underflow at t=" + std::to_string(t));
    }

    Vec x_next = rk_step(tab, f, t, x, h_eff, &k1, nullptr, tab.adaptive ? &err : nullptr, &k_last);
    out.n_evaluations += static_cast<std::size_t>(tab.stages - 1);

    if (!tab.adaptive) {
      if (!all_finite(x_next)) throw NonFiniteState("non-finite state at t=" + std::to_string(t_next));
      out.step_records.push_back({t, h_eff, x});
      t = t_next;
      x = std::move(x_next);
      k1 = f(t, x);
      ++out.n_evaluations;
      if (!all_finite(k1)) throw NonFiniteState("non-finite derivative at t=" + std::to_string(t));
      out.grid.nodes.push_back(t);
      out.states.push_back(x);
      out.derivatives.push_back(k1);
      if (t_next >= t1 || last) break;
      continue;
    }

    const bool finite = all_finite(x_next) && all_finite(k_last) && all_finite(err);
    const double norm = finite ? error_norm(err, x, x_next, spec.abs_tol, spec.rel_tol)
                               : std::numeric_limits<double>::infinity();
    const double alpha = 1.0 / (tab.error_order + 1) - 0.75 * kPiBeta;

    if (norm <= 1.0) {
      out.step_records.push_back({t, h_eff, x});
      t = t_next;
      x = std::move(x_next);
      k1 = k_last;
      out.grid.nodes.push_back(t);
      out.states.push_back(x);
      out.derivatives.push_back(k1);
      if (last) break;
      double factor = kMaxFactor;
      if (norm > 0.0) factor = kSafety * std::pow(norm, -alpha) * std::pow(err_prev, kPiBeta);
      factor = std::clamp(factor, kMinFactor, kMaxFactor);
      if (rejected_last) factor = std::min(factor, 1.0);
      err_prev = std::max(norm, 1e-4);
      h = h_eff * factor;
      rejected_last = false;
    } else {
      ++out.n_rejected;
      double factor = kMinFactor;
      if (std::isfinite(norm)) factor = std::max(kMinFactor, kSafety * std::pow(norm, -alpha));
      h = h_eff * factor;
      rejected_last = true;
      if (h <= 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(t))) {
        if (!finite) throw NonFiniteState("non-finite state near t=" + std::to_string(t));
        throw StepLimitExceeded("integrate_ivp: step size underflow at t=" + std::to_string(t));
      }
    }
  }
  return out;
}

std::vector<Vec> replay_fixed(const VectorField& f, const Vec& x0, std::span<const StepRecord> records,
                              Scheme scheme) {
  const Tableau& tab = tableau(scheme);
  std::vector<Vec> states;
  states.reserve(records.size() + 1);
  states.push_back(x0);
  Vec x = x0;
  for (const StepRecord& rec : records) {
    x = rk_step(tab, f, rec.t, x, rec.h);
    if (!all_finite(x)) throw NonFiniteState("replay_fixed: non-finite state at t=" + std::to_string(rec.t + rec.h));
    states.push_back(x);
  }
  return states;
}

Vec dense_sample(const IvpResult& result, double t) {
  const auto& nodes = result.grid.nodes;
  if (nodes.empty() || t < nodes.front() || t > nodes.back()) {
    throw OutOfSpan("dense_sample: t=" + std::to_string(t) + " outside the integrated span");
  }
  auto it = std::lower_bound(nodes.begin(), nodes.end(), t);
  auto idx = static_cast<std::size_t>(it - nodes.begin());
  if (it != nodes.end() && *it == t) return result.states[idx];
  // nodes[idx - 1] < t < nodes[idx]
  const std::size_t i = idx - 1;
  const double ta = nodes[i];
  const double h = nodes[idx] - ta;
  const double s = (t - ta) / h;
  const double s2 = s * s;
  const double s3 = s2 * s;
  const double h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
  const double h10 = s3 - 2.0 * s2 + s;
  const double h01 = -2.0 * s3 + 3.0 * s2;
  const double h11 = s3 - s2;
  return h00 * result.states[i] + (h10 * h) * result.derivatives[i] + h01 * result.states[idx] +
         (h11 * h) * result.derivatives[idx];
}

std::vector<Vec> dense_sample(const IvpResult& result, std::span<const double> query_times) {
  std::vector<Vec> out;
  out.reserve(query_times.size());
  for (double t : query_times) out.push_back(dense_sample(result, t));
  return out;
}

double compensated_step_sum(std::span<const StepRecord> records) {
  double sum = 0.0;
  double comp = 0.0;
  for (const StepRecord& r : records) {
    const double tmp = sum + r.h;
    if (std::abs(sum) >= std::abs(r.h)) {
      comp += (sum - tmp) + r.h;
    } else {
      comp += (r.h - tmp) + sum;
    }
    sum = tmp;
  }
  return sum + comp;
}

}  // namespace ocnet
