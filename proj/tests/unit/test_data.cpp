#include "ocnet/data.hpp"
#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace ocnet;
namespace fs = std::filesystem;

namespace {

InitBox interval(double lo, double hi) {
  InitBox b;
  b.lo = Vec::Constant(1, lo);
  b.hi = Vec::Constant(1, hi);
  return b;
}

ScalarLqOcp lq_problem(double lo = -1.0, double hi = 1.0) { return ScalarLqOcp({}, 1.0, interval(lo, hi)); }

GenerationOptions lq_options(std::size_t n, std::size_t nodes = 11) {
  GenerationOptions o;
  o.n_trajectories = n;
  o.nodes_per_trajectory = nodes;
  o.seed = 7;
  return o;
}

std::string temp_path(const std::string& name, const std::string& sub = "ocnet_test_data") {
  const fs::path dir = fs::temp_directory_path() / sub;
  fs::create_directories(dir);
  return (dir / name).string();
}

void expect_same_records(const std::vector<SampleRecord>& a, const std::vector<SampleRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].t, b[i].t);
    EXPECT_EQ(a[i].x, b[i].x);
    EXPECT_EQ(a[i].u, b[i].u);
  }
}

}  // namespace

TEST(Sampling, StaysInBoxAndPinsDegenerateDims) {
  const InitBox box = QuadrotorOcp::small_box();
  const auto xs = sample_initial_states(box, 200, 3);
  ASSERT_EQ(xs.size(), 200u);
  for (const Vec& x : xs) {
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      EXPECT_GE(x[j], box.lo[j]);
      EXPECT_LE(x[j], box.hi[j]);
      if (box.lo[j] == box.hi[j]) {
        EXPECT_EQ(x[j], box.lo[j]);
      }
    }
  }
  const auto again = sample_initial_states(box, 200, 3);
  const auto other = sample_initial_states(box, 200, 4);
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_EQ(xs[i], again[i]);
  EXPECT_NE(xs[0], other[0]);
}

TEST(Sampling, PrefixStable) {
  const auto a = sample_initial_states(SatelliteOcp::default_box(), 5, 11);
  const auto b = sample_initial_states(SatelliteOcp::default_box(), 50, 11);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(GenerateUniform, ScalarLqMatchesRiccatiFeedback) {
  const ScalarLqOcp lq = lq_problem();
  std::vector<SolvedTrajectory> sols;
  const Dataset ds = generate_uniform(lq, lq_options(5), &sols);
  EXPECT_EQ(ds.records.size(), 55u);
  EXPECT_EQ(ds.meta.n_records, 55u);
  EXPECT_EQ(ds.meta.n_failed, 0u);
  EXPECT_EQ(ds.meta.problem, "scalar_lq");
  EXPECT_EQ(sols.size(), 5u);
  std::size_t at_end = 0;
  for (const auto& r : ds.records) {
    EXPECT_GE(r.t, 0.0);
    EXPECT_LE(r.t, 1.0);
    if (r.t == 1.0) ++at_end;
    // q = r = 1, a = 0, b = 1, no terminal cost: u = -tanh(T - t) x
    EXPECT_NEAR(r.u[0], -std::tanh(1.0 - r.t) * r.x[0], 1e-6);
  }
  EXPECT_EQ(at_end, 5u);
}

TEST(GenerateUniform, EquilibriumGivesZeroControl) {
  const ScalarLqOcp lq = lq_problem(0.0, 0.0);
  const Dataset ds = generate_uniform(lq, lq_options(3));
  for (const auto& r : ds.records) {
    EXPECT_EQ(r.x[0], 0.0);
    EXPECT_EQ(r.u[0], 0.0);
  }
}

TEST(GenerateUniform, SatelliteSolutionsSatisfyPmp) {
  const OcpPtr sat = satellite_ocp();
  GenerationOptions o;
  o.n_trajectories = 2;
  o.nodes_per_trajectory = 11;
  o.seed = 1;
  std::vector<SolvedTrajectory> sols;
  const Dataset ds = generate_uniform(*sat, o, &sols);
  ASSERT_EQ(sols.size(), 2u);
  EXPECT_LE(ds.meta.max_terminal_residual, 1e-8);
  for (const auto& s : sols) {
    EXPECT_LE(s.solution.terminal_residual, 1e-8);
    for (std::size_t i = 0; i < s.solution.states.size(); ++i) {
      EXPECT_LE(hamiltonian_du(*sat, s.solution.states[i], s.solution.controls[i], s.solution.costates[i]).norm(), 1e-8);
    }
  }
  for (const auto& r : ds.records) {
    EXPECT_EQ(r.x.size(), 6);
    EXPECT_EQ(r.u.size(), 3);
  }
}

TEST(GenerateUniform, TooManyFailures) {
  const OcpPtr sat = satellite_ocp();
  GenerationOptions o;
  o.n_trajectories = 2;
  o.nodes_per_trajectory = 3;
  o.solver.shooting.max_newton_iters = 1;
  o.solver.schedule = ContinuationSchedule::time_marching({1.0});
  EXPECT_THROW(generate_uniform(*sat, o), TooManyFailures);
}

TEST(GenerateUniform, RejectsBadOptions) {
  const ScalarLqOcp lq = lq_problem();
  GenerationOptions o = lq_options(0);
  EXPECT_THROW(generate_uniform(lq, o), ConfigError);
  o = lq_options(2, 1);
  EXPECT_THROW(generate_uniform(lq, o), ConfigError);
}

TEST(GenerateUniform, DeterministicAcrossWorkers) {
  const ScalarLqOcp lq = lq_problem();
  GenerationOptions o = lq_options(6);
  const Dataset a = generate_uniform(lq, o);
  o.workers = 3;
  const Dataset b = generate_uniform(lq, o);
  expect_same_records(a.records, b.records);
  const std::string pa = temp_path("det.csv"), pb = temp_path("det.csv", "ocnet_test_data_b");
  write_dataset(a, pa);
  write_dataset(b, pb);
  EXPECT_EQ(read_file(pa), read_file(pb));
  EXPECT_EQ(read_file(dataset_meta_path(pa)), read_file(dataset_meta_path(pb)));
}

TEST(DatasetIo, RoundTripIsExact) {
  const ScalarLqOcp lq = lq_problem();
  const Dataset ds = generate_uniform(lq, lq_options(4));
  const std::string path = temp_path("rt.csv");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  expect_same_records(ds.records, back.records);
  EXPECT_EQ(back.meta.problem, ds.meta.problem);
  EXPECT_EQ(back.meta.n_records, ds.meta.n_records);
  EXPECT_EQ(back.meta.seed, ds.meta.seed);
  EXPECT_EQ(back.meta.marching_stages, ds.meta.marching_stages);
  EXPECT_EQ(back.meta.max_residual, ds.meta.max_residual);
  const std::string again = temp_path("rt.csv", "ocnet_test_data_b");
  write_dataset(back, again);
  EXPECT_EQ(read_file(path), read_file(again));
  EXPECT_EQ(read_file(dataset_meta_path(path)), read_file(dataset_meta_path(again)));
}

TEST(DatasetIo, EmptyDatasetRoundTrips) {
  Dataset ds;
  ds.meta.problem = "scalar_lq";
  ds.meta.state_dim = 1;
  ds.meta.control_dim = 1;
  const std::string path = temp_path("empty.csv");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  EXPECT_TRUE(back.records.empty());
  EXPECT_EQ(back.meta.state_dim, 1);
}

TEST(DatasetIo, WrongColumnCountIsSchemaMismatch) {
  const ScalarLqOcp lq = lq_problem();
  const Dataset ds = generate_uniform(lq, lq_options(1, 2));
  const std::string path = temp_path("bad_cols.csv");
  write_dataset(ds, path);
  std::string body = read_file(path);
  body.insert(body.find('\n', body.find('\n') + 1), ",0.5");
  std::ofstream(path, std::ios::binary | std::ios::trunc) << body;
  EXPECT_THROW(read_dataset(path), SchemaMismatch);
}

TEST(DatasetIo, BadHeaderIsSchemaMismatch) {
  const std::string path = temp_path("bad_header.csv");
  std::ofstream(path, std::ios::trunc) << "t,x,u\n0,1,2\n";
  EXPECT_THROW(read_dataset(path), SchemaMismatch);
}

TEST(DatasetIo, MissingFileIsIoError) { EXPECT_THROW(read_dataset(temp_path("does_not_exist.csv")), IoError); }

TEST(GenerateAdaptive, DegenerateGridEqualsUniform) {
  const ScalarLqOcp lq = lq_problem();
  const GenerationOptions o = lq_options(4);
  std::size_t calls = 0;
  const InterimTrainer trainer = [&](const Dataset&, std::size_t) {
    ++calls;
    return init_params(1, 1, 0);
  };
  const Dataset adaptive = generate_adaptive(lq, {{0.0, 1.0}}, o, trainer, IntegratorSpec{});
  const Dataset uniform = generate_uniform(lq, o);
  EXPECT_EQ(calls, 0u);
  EXPECT_EQ(adaptive.meta.sampling, "adaptive");
  expect_same_records(adaptive.records, uniform.records);
}

TEST(GenerateAdaptive, LaterRoundsStartAtCheckpoint) {
  const ScalarLqOcp lq = lq_problem();
  const GenerationOptions o = lq_options(5);
  std::vector<std::size_t> seen_rounds;
  std::vector<std::size_t> seen_records;
  const InterimTrainer trainer = [&](const Dataset& acc, std::size_t round) {
    seen_rounds.push_back(round);
    seen_records.push_back(acc.records.size());
    MlpParams p = init_params(1, 1, 0);
    p.theta.setZero();  // u = 0 holds x constant up to the checkpoint
    return p;
  };
  std::vector<SolvedTrajectory> sols;
  const Dataset ds = generate_adaptive(lq, {{0.0, 0.5, 1.0}}, o, trainer, IntegratorSpec{}, &sols);
  ASSERT_EQ(seen_rounds, (std::vector<std::size_t>{1}));
  EXPECT_EQ(seen_records.front(), 3u * 11u);
  EXPECT_EQ(ds.meta.round_trajectories, (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(ds.records.size(), 5u * 11u);
  ASSERT_EQ(sols.size(), 5u);
  EXPECT_EQ(sols[3].t_offset, 0.5);
  const auto x0s_round1 = sample_initial_states(lq.init_box(), 2, derive_seed(o.seed, 101));
  EXPECT_NEAR(sols[3].x0[0], x0s_round1[0][0], 1e-12);
  std::size_t late = 0;
  for (const auto& r : ds.records) {
    EXPECT_NEAR(r.u[0], -std::tanh(1.0 - r.t) * r.x[0], 1e-6);
    if (r.t >= 0.5) ++late;
  }
  // round 0 contributes 3 trajectories with 6 of 11 nodes at t >= 0.5
  EXPECT_EQ(late, 3u * 6u + 2u * 11u);
}

TEST(GenerateAdaptive, GridValidation) {
  EXPECT_THROW(AdaptiveGrid{{0.0}}.validate(1.0), ConfigError);
  EXPECT_THROW((AdaptiveGrid{{0.1, 1.0}}.validate(1.0)), ConfigError);
  EXPECT_THROW((AdaptiveGrid{{0.0, 0.9}}.validate(1.0)), ConfigError);
  EXPECT_THROW((AdaptiveGrid{{0.0, 0.5, 0.5, 1.0}}.validate(1.0)), ConfigError);
  EXPECT_NO_THROW((AdaptiveGrid{{0.0, 10.0, 14.0, 16.0}}.validate(16.0)));
}

TEST(Schemes, NamesRoundTrip) {
  for (Scheme s : {Scheme::DormandPrince54, Scheme::BogackiShampine23, Scheme::FixedRK4}) {
    EXPECT_EQ(parse_scheme(scheme_name(s)), s);
  }
  EXPECT_EQ(parse_scheme("rk23"), Scheme::BogackiShampine23);
  EXPECT_EQ(parse_scheme("dopri5"), Scheme::DormandPrince54);
  EXPECT_THROW(parse_scheme("euler"), ConfigError);
}
