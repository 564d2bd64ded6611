#include "ocnet/data.hpp"

#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/parallel.hpp"
#include "ocnet/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

namespace ocnet {

using nlohmann::json;

std::vector<Vec> sample_initial_states(const InitBox& box, std::size_t count, std::uint64_t seed) {
  box.validate();
  Rng rng(seed);
  std::vector<Vec> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Vec x(box.dim());
    for (Eigen::Index j = 0; j < box.dim(); ++j) x[j] = box.lo[j] == box.hi[j] ? box.lo[j] : rng.uniform(box.lo[j], box.hi[j]);
    out.push_back(std::move(x));
  }
  return out;
}

std::string scheme_name(Scheme scheme) {
  switch (scheme) {
    case Scheme::DormandPrince54:
      return "dopri54";
    case Scheme::BogackiShampine23:
      return "bs23";
    case Scheme::FixedRK4:
      return "rk4";
  }
  return "dopri54";
}

Scheme parse_scheme(const std::string& name) {
  if (name == "dopri54" || name == "dopri5") return Scheme::DormandPrince54;
  if (name == "bs23" || name == "rk23") return Scheme::BogackiShampine23;
  if (name == "rk4") return Scheme::FixedRK4;
  throw ConfigError("unknown integrator scheme '" + name + "'");
}

namespace {

constexpr const char* kDatasetTag = "# ocnet-dataset v1";
constexpr const char* kMetaFormat = "ocnet-dataset-meta v1";

void fill_solver_meta(DatasetMeta& m, const Ocp& ocp, const GenerationOptions& o) {
  const ContinuationSchedule sched = o.solver.schedule.value_or(ContinuationSchedule::default_for(ocp));
  m.problem = ocp.name();
  m.state_dim = ocp.state_dim();
  m.control_dim = ocp.control_dim();
  m.horizon = ocp.horizon();
  m.nodes_per_trajectory = o.nodes_per_trajectory;
  m.seed = o.seed;
  m.residual_tol = o.solver.shooting.residual_tol;
  m.abs_tol = o.solver.integ.abs_tol;
  m.rel_tol = o.solver.integ.rel_tol;
  m.scheme = scheme_name(o.solver.integ.scheme);
  m.marching = sched.kind == MarchKind::TimeMarching ? "time" : "space";
  m.marching_stages = sched.stages;
}

struct RoundResult {
  std::vector<SampleRecord> records;
  std::vector<SolvedTrajectory> solved;
  std::size_t failed = 0;
};

// Solves from each start (nullopt = already failed upstream) on the problem
// `sub`, whose t = 0 corresponds to absolute time t_offset.
RoundResult solve_round(const Ocp& sub, double t_offset, double t_end, const std::vector<std::optional<Vec>>& starts,
                        const GenerationOptions& o) {
  const ContinuationSchedule sched = o.solver.schedule.value_or(ContinuationSchedule::default_for(sub));
  std::vector<std::optional<OpenLoopSolution>> sols(starts.size());
  parallel_for(starts.size(), o.workers, [&](std::size_t i) {
    if (!starts[i]) return;
    try {
      OpenLoopSolution s = solve_with_continuation(sub, *starts[i], sched, o.solver.shooting, o.solver.integ);
      if (s.converged) sols[i] = std::move(s);
    } catch (const Error&) {
    }
  });
  RoundResult r;
  const std::size_t nodes = o.nodes_per_trajectory;
  const double span = sub.horizon();
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (!sols[i]) {
      ++r.failed;
      continue;
    }
    for (std::size_t j = 0; j < nodes; ++j) {
      const double s = nodes == 1 ? 0.0 : (j + 1 == nodes ? span : span * static_cast<double>(j) / static_cast<double>(nodes - 1));
      const PmpPoint p = sample_solution(sub, *sols[i], s);
      r.records.push_back({std::min(t_offset + s, t_end), p.x, p.u});
    }
    r.solved.push_back({t_offset, *starts[i], std::move(*sols[i])});
  }
  return r;
}

void check_failures(std::size_t failed, std::size_t total, double ceiling, const std::string& what) {
  if (total > 0 && static_cast<double>(failed) > ceiling * static_cast<double>(total)) {
    throw TooManyFailures(what + ": " + std::to_string(failed) + " of " + std::to_string(total) +
                          " open-loop solves failed");
  }
}

void update_diagnostics(DatasetMeta& m, const std::vector<SolvedTrajectory>& solved) {
  for (const auto& s : solved) {
    m.max_residual = std::max(m.max_residual, s.solution.residual);
    m.max_terminal_residual = std::max(m.max_terminal_residual, s.solution.terminal_residual);
  }
}

void shuffle_records(std::vector<SampleRecord>& recs, std::uint64_t seed) {
  const auto idx = shuffled_indices(recs.size(), derive_seed(seed, 2));
  std::vector<SampleRecord> out;
  out.reserve(recs.size());
  for (std::size_t i : idx) out.push_back(std::move(recs[i]));
  recs = std::move(out);
}

void validate_options(const GenerationOptions& o) {
  if (o.n_trajectories < 1) throw ConfigError("n_trajectories must be >= 1");
  if (o.nodes_per_trajectory < 2) throw ConfigError("nodes_per_trajectory must be >= 2");
  if (!(o.max_failure_fraction >= 0.0 && o.max_failure_fraction <= 1.0)) {
    throw ConfigError("max_failure_fraction must lie in [0, 1]");
  }
  o.solver.shooting.validate();
  o.solver.integ.validate();
}

}  // namespace

Dataset generate_uniform(const Ocp& ocp, const GenerationOptions& o, std::vector<SolvedTrajectory>* solutions) {
  validate_options(o);
  const auto x0s = sample_initial_states(ocp.init_box(), o.n_trajectories, derive_seed(o.seed, 1));
  std::vector<std::optional<Vec>> starts(x0s.begin(), x0s.end());
  RoundResult r = solve_round(ocp, 0.0, ocp.horizon(), starts, o);
  check_failures(r.failed, o.n_trajectories, o.max_failure_fraction, ocp.name() + " dataset");
  Dataset ds;
  fill_solver_meta(ds.meta, ocp, o);
  ds.meta.sampling = "uniform";
  ds.meta.n_trajectories = o.n_trajectories;
  ds.meta.n_failed = r.failed;
  update_diagnostics(ds.meta, r.solved);
  ds.records = std::move(r.records);
  shuffle_records(ds.records, o.seed);
  ds.meta.n_records = ds.records.size();
  if (solutions) *solutions = std::move(r.solved);
  return ds;
}

void AdaptiveGrid::validate(double horizon) const {
  if (checkpoints.size() < 2) throw ConfigError("adaptive grid needs at least the endpoints 0 and T");
  if (checkpoints.front() != 0.0) throw ConfigError("adaptive grid must start at 0");
  if (checkpoints.back() != horizon) throw ConfigError("adaptive grid must end at the horizon");
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    if (!(checkpoints[i] > checkpoints[i - 1])) throw ConfigError("adaptive grid must be strictly increasing");
  }
}

Dataset generate_adaptive(const Ocp& ocp, const AdaptiveGrid& grid, const GenerationOptions& o,
                          const InterimTrainer& trainer, const IntegratorSpec& rollout_integ,
                          std::vector<SolvedTrajectory>* solutions) {
  validate_options(o);
  grid.validate(ocp.horizon());
  const double T = ocp.horizon();
  const std::size_t rounds = grid.checkpoints.size() - 1;
  if (o.n_trajectories < rounds) throw ConfigError("fewer trajectories than adaptive rounds");
  // round 0 takes the remainder so a degenerate grid is exactly the uniform case
  std::vector<std::size_t> budget(rounds, o.n_trajectories / rounds);
  budget[0] += o.n_trajectories % rounds;

  Dataset ds;
  fill_solver_meta(ds.meta, ocp, o);
  ds.meta.sampling = "adaptive";
  ds.meta.n_trajectories = o.n_trajectories;
  ds.meta.grid = grid.checkpoints;
  std::vector<SolvedTrajectory> all_solved;

  for (std::size_t k = 0; k < rounds; ++k) {
    const double tau = grid.checkpoints[k];
    const auto x0s = sample_initial_states(ocp.init_box(), budget[k], k == 0 ? derive_seed(o.seed, 1) : derive_seed(o.seed, 100 + k));
    std::vector<std::optional<Vec>> starts(x0s.begin(), x0s.end());
    if (k > 0) {
      ds.meta.n_records = ds.records.size();
      const MlpParams interim = trainer(ds, k);
      const OcpPtr head = ocp.with_horizon(tau);
      const Controller c = network_controller(interim);
      std::vector<std::optional<Vec>> reached(starts.size());
      parallel_for(starts.size(), o.workers, [&](std::size_t i) {
        const ClosedLoopRun run = rollout_closed_loop(*head, c, *starts[i], rollout_integ);
        if (!run.diverged) reached[i] = run.states.back();
      });
      starts = std::move(reached);
    }
    const OcpPtr tail = k == 0 ? ocp.with_horizon(T) : ocp.with_horizon(T - tau);
    RoundResult r = solve_round(*tail, tau, T, starts, o);
    check_failures(r.failed, budget[k], o.max_failure_fraction, ocp.name() + " adaptive round " + std::to_string(k));
    ds.meta.round_trajectories.push_back(budget[k]);
    ds.meta.round_failures.push_back(r.failed);
    ds.meta.n_failed += r.failed;
    update_diagnostics(ds.meta, r.solved);
    for (auto& rec : r.records) ds.records.push_back(std::move(rec));
    for (auto& s : r.solved) all_solved.push_back(std::move(s));
  }
  shuffle_records(ds.records, o.seed);
  ds.meta.n_records = ds.records.size();
  if (solutions) *solutions = std::move(all_solved);
  return ds;
}

// ---------------------------------------------------------------------------
// persistence

std::string dataset_meta_path(const std::string& path) { return path + ".meta.json"; }

namespace {

json meta_to_json(const DatasetMeta& m) {
  json j;
  j["format"] = kMetaFormat;
  j["problem"] = m.problem;
  j["state_dim"] = m.state_dim;
  j["control_dim"] = m.control_dim;
  j["horizon"] = m.horizon;
  j["sampling"] = m.sampling;
  j["n_trajectories"] = m.n_trajectories;
  j["nodes_per_trajectory"] = m.nodes_per_trajectory;
  j["n_failed"] = m.n_failed;
  j["n_records"] = m.n_records;
  j["seed"] = m.seed;
  j["solver"] = {{"residual_tol", m.residual_tol}, {"abs_tol", m.abs_tol},   {"rel_tol", m.rel_tol},
                 {"scheme", m.scheme},             {"marching", m.marching}, {"marching_stages", m.marching_stages}};
  j["max_residual"] = m.max_residual;
  j["max_terminal_residual"] = m.max_terminal_residual;
  if (m.sampling == "adaptive") {
    j["grid"] = m.grid;
    j["round_trajectories"] = m.round_trajectories;
    j["round_failures"] = m.round_failures;
  }
  return j;
}

DatasetMeta meta_from_json(const json& j, const std::string& path) {
  try {
    if (j.at("format").get<std::string>() != kMetaFormat) throw SchemaMismatch(path + ": unsupported meta format");
    DatasetMeta m;
    m.problem = j.at("problem").get<std::string>();
    m.state_dim = j.at("state_dim").get<int>();
    m.control_dim = j.at("control_dim").get<int>();
    m.horizon = j.at("horizon").get<double>();
    m.sampling = j.at("sampling").get<std::string>();
    m.n_trajectories = j.at("n_trajectories").get<std::size_t>();
    m.nodes_per_trajectory = j.at("nodes_per_trajectory").get<std::size_t>();
    m.n_failed = j.at("n_failed").get<std::size_t>();
    m.n_records = j.at("n_records").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    const json& s = j.at("solver");
    m.residual_tol = s.at("residual_tol").get<double>();
    m.abs_tol = s.at("abs_tol").get<double>();
    m.rel_tol = s.at("rel_tol").get<double>();
    m.scheme = s.at("scheme").get<std::string>();
    m.marching = s.at("marching").get<std::string>();
    m.marching_stages = s.at("marching_stages").get<std::vector<double>>();
    m.max_residual = j.at("max_residual").get<double>();
    m.max_terminal_residual = j.at("max_terminal_residual").get<double>();
    if (m.sampling == "adaptive") {
      m.grid = j.at("grid").get<std::vector<double>>();
      m.round_trajectories = j.at("round_trajectories").get<std::vector<std::size_t>>();
      m.round_failures = j.at("round_failures").get<std::vector<std::size_t>>();
    }
    return m;
  } catch (const json::exception& e) {
    throw SchemaMismatch(path + ": bad dataset metadata (" + std::string(e.what()) + ")");
  }
}

std::vector<double> split_numbers(const std::string& line) {
  std::vector<double> vals;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    const auto len = comma == std::string::npos ? std::string::npos : comma - start;
    vals.push_back(parse_double(std::string_view(line).substr(start, len)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return vals;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  const DatasetMeta& m = ds.meta;
  if (m.n_records != ds.records.size()) throw IoError("dataset meta record count does not match its records");
  const std::string meta_path = dataset_meta_path(path);
  std::ostringstream os;
  os << kDatasetTag << " problem=" << m.problem << " state_dim=" << m.state_dim << " control_dim=" << m.control_dim
     << " records=" << ds.records.size() << " meta=" << std::filesystem::path(meta_path).filename().string() << '\n';
  for (const SampleRecord& r : ds.records) {
    if (r.x.size() != m.state_dim || r.u.size() != m.control_dim) throw IoError("record dimensions do not match meta");
    os << format_double(r.t);
    for (Eigen::Index i = 0; i < r.x.size(); ++i) os << ',' << format_double(r.x[i]);
    for (Eigen::Index i = 0; i < r.u.size(); ++i) os << ',' << format_double(r.u[i]);
    os << '\n';
  }
  write_file_atomic(meta_path, meta_to_json(m).dump(2) + "\n");
  write_file_atomic(path, os.str());
}

Dataset read_dataset(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string header;
  if (!std::getline(in, header) || header.rfind(kDatasetTag, 0) != 0) throw SchemaMismatch(path + " is not a dataset file");
  std::string problem, meta_name;
  long n = -1, m = -1, count = -1;
  {
    std::istringstream hs(header.substr(std::string(kDatasetTag).size()));
    std::string kv;
    try {
      while (hs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw SchemaMismatch(path + ": bad header field '" + kv + "'");
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "problem") problem = val;
        else if (key == "state_dim") n = std::stol(val);
        else if (key == "control_dim") m = std::stol(val);
        else if (key == "records") count = std::stol(val);
        else if (key == "meta") meta_name = val;
      }
    } catch (const std::logic_error&) {
      throw SchemaMismatch(path + ": bad dataset header");
    }
  }
  if (n < 1 || m < 1 || count < 0 || meta_name.empty()) throw SchemaMismatch(path + ": incomplete dataset header");
  const auto meta_path = (std::filesystem::path(path).parent_path() / meta_name).string();
  json j;
  try {
    j = json::parse(read_file(meta_path));
  } catch (const json::exception& e) {
    throw SchemaMismatch(meta_path + ": " + e.what());
  }
  Dataset ds;
  ds.meta = meta_from_json(j, meta_path);
  if (ds.meta.problem != problem || ds.meta.state_dim != n || ds.meta.control_dim != m) {
    throw SchemaMismatch(path + ": header and metadata disagree on the problem or its dimensions");
  }
  const auto cols = static_cast<std::size_t>(1 + n + m);
  ds.records.reserve(static_cast<std::size_t>(count));
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto vals = split_numbers(line);
    if (vals.size() != cols) {
      throw SchemaMismatch(path + ":" + std::to_string(lineno) + ": " + std::to_string(vals.size()) +
                           " columns, expected " + std::to_string(cols) + " for " + problem);
    }
    SampleRecord r;
    r.t = vals[0];
    r.x = Eigen::Map<const Vec>(vals.data() + 1, n);
    r.u = Eigen::Map<const Vec>(vals.data() + 1 + n, m);
    ds.records.push_back(std::move(r));
  }
  if (static_cast<long>(ds.records.size()) != count || ds.meta.n_records != ds.records.size()) {
    throw IoError(path + ": record count does not match the header");
  }
  return ds;
}

}  // namespace ocnet
