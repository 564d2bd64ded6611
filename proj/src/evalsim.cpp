#include "ocnet/evalsim.hpp"

#include "ocnet/data.hpp"
#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/parallel.hpp"
#include "ocnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ocnet {

void NoiseSpec::validate() const {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("noise sigma must be >= 0");
  if (!(hold_dt > 0.0) || !std::isfinite(hold_dt)) throw ConfigError("noise hold_dt must be > 0");
}

Vec zoh_noise(const NoiseSpec& noise, Eigen::Index dim, std::uint64_t k) {
  Vec n(dim);
  for (Eigen::Index i = 0; i < dim; ++i) n[i] = noise.sigma * hash_symmetric(noise.seed, k, static_cast<std::uint64_t>(i));
  return n;
}

Controller network_controller(const MlpParams& params) {
  return [&params](double t, const Vec& x) { return forward(params, t, x); };
}

namespace {

std::uint64_t hold_index(const NoiseSpec& noise, double t) {
  return t <= 0.0 ? 0 : static_cast<std::uint64_t>(std::floor(t / noise.hold_dt));
}

}  // namespace

ClosedLoopRun rollout_closed_loop(const Ocp& ocp, const Controller& controller, const Vec& x0,
                                  const IntegratorSpec& integ, const std::optional<NoiseSpec>& noise) {
  const Eigen::Index n = ocp.state_dim();
  if (x0.size() != n) throw ConfigError("initial state has the wrong dimension");
  if (!x0.allFinite()) throw NonFiniteState("initial state is not finite");
  if (noise) noise->validate();
  const bool noisy = noise && noise->sigma > 0.0;
  // measured state = true state + n(t); the dynamics always see the true state
  auto measure = [&](double t, const Vec& x) -> Vec {
    if (!noisy) return x;
    return x + zoh_noise(*noise, n, hold_index(*noise, t));
  };
  const VectorField f = [&](double t, const Vec& y) {
    const Vec x = y.head(n);
    const Vec u = controller(t, measure(t, x));
    Vec dy(n + 1);
    dy.head(n) = ocp.dynamics(x, u);
    dy[n] = ocp.running_cost(x, u);
    return dy;
  };
  ClosedLoopRun run;
  run.noise = noise;
  Vec y0(n + 1);
  y0 << x0, 0.0;
  try {
    const IvpResult ivp = integrate_ivp(f, y0, 0.0, ocp.horizon(), integ);
    run.grid = ivp.grid;
    const Vec& yT = ivp.final_state();
    run.running_cost = yT[n];
    run.terminal_cost = ocp.terminal_cost(yT.head(n));
    run.total_cost = run.running_cost + run.terminal_cost;
    if (!std::isfinite(run.total_cost)) throw NonFiniteState("closed-loop cost is not finite");
    run.states.reserve(ivp.states.size());
    run.controls.reserve(ivp.states.size());
    for (std::size_t i = 0; i < ivp.states.size(); ++i) {
      run.states.push_back(ivp.states[i].head(n));
      run.controls.push_back(controller(run.grid.nodes[i], measure(run.grid.nodes[i], run.states.back())));
    }
  } catch (const NonFiniteState& e) {
    run.diverged = true;
    run.failure = e.what();
  } catch (const GimbalLock& e) {
    run.diverged = true;
    run.failure = e.what();
  } catch (const StepLimitExceeded& e) {
    run.diverged = true;
    run.failure = e.what();
  }
  return run;
}

ClosedLoopRun rollout_closed_loop(const Ocp& ocp, const MlpParams& params, const Vec& x0, const IntegratorSpec& integ,
                                  const std::optional<NoiseSpec>& noise) {
  if (params.arch.state_dim != ocp.state_dim() || params.arch.control_dim != ocp.control_dim()) {
    throw SchemaMismatch("network dimensions do not match " + ocp.name());
  }
  return rollout_closed_loop(ocp, network_controller(params), x0, integ, noise);
}

CostRatioStats summarize_ratios(std::vector<double> ratios, std::vector<std::size_t> diverged) {
  CostRatioStats s;
  s.n_diverged = diverged.size();
  s.diverged = std::move(diverged);
  s.ratios = std::move(ratios);
  if (s.ratios.empty()) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.mean = s.std = s.max = s.min = s.median = nan;
    return s;
  }
  const double n = static_cast<double>(s.ratios.size());
  double sum = 0.0;
  for (double r : s.ratios) sum += r;
  s.mean = sum / n;
  double sq = 0.0;
  for (double r : s.ratios) sq += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(sq / n);
  std::vector<double> sorted = s.ratios;
  std::sort(sorted.begin(), sorted.end());
  s.min = sorted.front();
  s.max = sorted.back();
  s.median = sorted[(sorted.size() - 1) / 2];
  return s;
}

CostRatioStats evaluate_cost_ratio(const Ocp& ocp, const std::function<Controller(std::size_t)>& controller_for,
                                   const ValidationSet& validation, const EvalOptions& options) {
  if (validation.costs.size() != validation.states.size()) {
    throw MissingReference("validation set has " + std::to_string(validation.states.size()) + " states but " +
                           std::to_string(validation.costs.size()) + " reference costs");
  }
  for (std::size_t i = 0; i < validation.costs.size(); ++i) {
    if (!(validation.costs[i] > 0.0) || !std::isfinite(validation.costs[i])) {
      throw MissingReference("reference cost for state " + std::to_string(i) + " is not positive");
    }
  }
  const std::size_t count = validation.states.size();
  std::vector<ClosedLoopRun> runs(count);
  parallel_for(count, options.workers, [&](std::size_t i) {
    std::optional<NoiseSpec> noise = options.noise;
    if (noise) noise->seed = derive_seed(noise->seed, i);
    runs[i] = rollout_closed_loop(ocp, controller_for(i), validation.states[i], options.integ, noise);
  });
  std::vector<double> ratios;
  std::vector<std::size_t> diverged;
  for (std::size_t i = 0; i < count; ++i) {
    if (runs[i].diverged) {
      diverged.push_back(i);
    } else {
      ratios.push_back(runs[i].total_cost / validation.costs[i]);
    }
  }
  return summarize_ratios(std::move(ratios), std::move(diverged));
}

CostRatioStats evaluate_cost_ratio(const Ocp& ocp, const MlpParams& params, const ValidationSet& validation,
                                   const EvalOptions& options) {
  if (params.arch.state_dim != ocp.state_dim() || params.arch.control_dim != ocp.control_dim()) {
    throw SchemaMismatch("network dimensions do not match " + ocp.name());
  }
  const Controller c = network_controller(params);
  return evaluate_cost_ratio(ocp, [&c](std::size_t) { return c; }, validation, options);
}

std::string cdf_table(const CostRatioStats& stats) {
  std::vector<double> sorted = stats.ratios;
  std::sort(sorted.begin(), sorted.end());
  std::ostringstream os;
  os << "ratio,cdf\n";
  const auto n = sorted.size();
  for (std::size_t k = 0; k < n; ++k) {
    os << format_double(sorted[k]) << ',' << format_double(static_cast<double>(k + 1) / static_cast<double>(n)) << '\n';
  }
  return os.str();
}

void export_cdf(const CostRatioStats& stats, const std::string& path) {
  if (stats.ratios.empty()) throw IoError("no cost ratios to export");
  write_file_atomic(path, cdf_table(stats));
}

ValidationSet build_validation_set(const Ocp& ocp, const ValidationBuildOptions& options) {
  if (options.count < 1) throw ConfigError("validation count must be >= 1");
  const std::size_t budget = options.max_attempts ? options.max_attempts : 3 * options.count;
  const std::vector<Vec> candidates = sample_initial_states(ocp.init_box(), budget, options.seed);
  const ContinuationSchedule schedule = options.schedule.value_or(ContinuationSchedule::default_for(ocp));
  ValidationSet set;
  set.problem = ocp.name();
  set.horizon = ocp.horizon();
  set.seed = options.seed;
  std::size_t next = 0;
  while (set.states.size() < options.count && next < budget) {
    const std::size_t take = std::min(options.count - set.states.size(), budget - next);
    std::vector<double> costs(take, -1.0);
    parallel_for(take, options.workers, [&](std::size_t j) {
      try {
        const OpenLoopSolution sol = solve_with_continuation(ocp, candidates[next + j], schedule, options.shooting, options.integ);
        if (sol.converged) costs[j] = sol.total_cost;
      } catch (const Error&) {
      }
    });
    for (std::size_t j = 0; j < take; ++j) {
      if (costs[j] > options.min_cost && std::isfinite(costs[j])) {
        set.states.push_back(candidates[next + j]);
        set.costs.push_back(costs[j]);
      }
    }
    next += take;
  }
  if (set.states.size() < options.count) {
    throw TooManyFailures("only " + std::to_string(set.states.size()) + " of " + std::to_string(options.count) +
                          " validation references after " + std::to_string(budget) + " solves");
  }
  return set;
}

namespace {
constexpr const char* kValidationTag = "# ocnet-validation v1";
}

void write_validation_set(const ValidationSet& set, const std::string& path) {
  std::ostringstream os;
  const Eigen::Index n = set.states.empty() ? 0 : set.states.front().size();
  os << kValidationTag << " problem=" << set.problem << " horizon=" << format_double(set.horizon)
     << " seed=" << set.seed << " state_dim=" << n << " count=" << set.states.size() << '\n';
  for (std::size_t i = 0; i < set.states.size(); ++i) {
    os << format_double(set.costs[i]);
    for (Eigen::Index j = 0; j < n; ++j) os << ',' << format_double(set.states[i][j]);
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

ValidationSet read_validation_set(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind(kValidationTag, 0) != 0) {
    throw SchemaMismatch(path + " is not a validation set file");
  }
  ValidationSet set;
  long n = -1, count = -1;
  std::istringstream hs(line.substr(std::string(kValidationTag).size()));
  std::string kv;
  try {
    while (hs >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw IoError("bad validation header field '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "problem") set.problem = val;
      else if (key == "horizon") set.horizon = parse_double(val);
      else if (key == "seed") set.seed = std::stoull(val);
      else if (key == "state_dim") n = std::stol(val);
      else if (key == "count") count = std::stol(val);
    }
  } catch (const std::logic_error&) {
    throw IoError("bad validation header in " + path);
  }
  if (n < 0 || count < 0) throw IoError("validation header in " + path + " lacks state_dim or count");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      vals.push_back(parse_double(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<long>(vals.size()) != n + 1) throw SchemaMismatch(path + ": wrong column count");
    set.costs.push_back(vals[0]);
    set.states.push_back(Eigen::Map<const Vec>(vals.data() + 1, n));
  }
  if (static_cast<long>(set.states.size()) != count) throw IoError(path + ": record count does not match header");
  return set;
}

}  // namespace ocnet
