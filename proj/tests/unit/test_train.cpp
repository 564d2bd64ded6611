#include "ocnet/errors.hpp"
#include "ocnet/rng.hpp"
#include "ocnet/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace ocnet;

namespace {

InitBox interval(double lo, double hi) {
  InitBox b;
  b.lo = Vec::Constant(1, lo);
  b.hi = Vec::Constant(1, hi);
  return b;
}

// x' = u, L = u^2, M = x^2
OcpPtr unit_problem(double horizon = 1.0) {
  ScalarLqParams p;
  p.q = 0.0;
  p.terminal = 1.0;
  return std::make_shared<ScalarLqOcp>(p, horizon, interval(-1.0, 1.0));
}

MlpArch small_arch(int n, int m) {
  MlpArch a;
  a.state_dim = n;
  a.control_dim = m;
  a.hidden = {8, 8};
  return a;
}

IntegratorSpec tight() {
  IntegratorSpec s;
  s.abs_tol = s.rel_tol = 1e-10;
  return s;
}

Vec unit_direction(Eigen::Index size, std::uint64_t seed) {
  Rng rng(seed);
  Vec v(size);
  for (auto& e : v) e = rng.uniform(-1.0, 1.0);
  return v / v.norm();
}

double directional_fd(const std::function<double(const MlpParams&)>& f, const MlpParams& p, const Vec& v, double eps) {
  MlpParams plus = p, minus = p;
  plus.theta += eps * v;
  minus.theta -= eps * v;
  return (f(plus) - f(minus)) / (2.0 * eps);
}

std::vector<SampleRecord> random_records(int n, int m, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    SampleRecord r;
    r.t = rng.uniform(0.0, 2.0);
    r.x = Vec(n);
    r.u = Vec(m);
    for (auto& e : r.x) e = rng.uniform(-1.0, 1.0);
    for (auto& e : r.u) e = rng.uniform(-1.0, 1.0);
    out.push_back(r);
  }
  return out;
}

Dataset scalar_dataset(std::size_t count, std::uint64_t seed) {
  Dataset ds;
  ds.meta.problem = "scalar_lq";
  ds.meta.state_dim = ds.meta.control_dim = 1;
  ds.records = random_records(1, 1, count, seed);
  ds.meta.n_records = ds.records.size();
  return ds;
}

}  // namespace

// ---------------------------------------------------------------------------
// supervised loss

TEST(SlLoss, ZeroNetworkUnitTarget) {
  MlpParams p = init_params(6, 3, 1);
  p.theta.setZero();
  SampleRecord r{0.7, Vec::Constant(6, 0.3), Vec::Unit(3, 0)};
  const LossGrad lg = sl_loss(p, std::span<const SampleRecord>(&r, 1));
  EXPECT_EQ(lg.loss, 1.0);
}

TEST(SlLoss, PerfectFitHasZeroLossAndGradient) {
  const MlpParams p = init_params(small_arch(2, 2), 4);
  auto recs = random_records(2, 2, 5, 1);
  for (auto& r : recs) r.u = forward(p, r.t, r.x);
  const LossGrad lg = sl_loss(p, recs);
  EXPECT_LE(lg.loss, 1e-30);
  EXPECT_LE(lg.grad.norm(), 1e-15);
}

TEST(SlLoss, GradientMatchesFiniteDifferences) {
  const MlpParams p = init_params(small_arch(3, 2), 2);
  const auto recs = random_records(3, 2, 3, 5);
  const LossGrad lg = sl_loss(p, recs);
  for (Eigen::Index i = 0; i < p.theta.size(); ++i) {
    const double h = 1e-6;
    MlpParams a = p, b = p;
    a.theta[i] += h;
    b.theta[i] -= h;
    const double fd = (sl_loss(a, recs).loss - sl_loss(b, recs).loss) / (2.0 * h);
    EXPECT_NEAR(lg.grad[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "parameter " << i;
  }
}

TEST(SlLoss, IndexedBatchMatchesSpan) {
  const MlpParams p = init_params(small_arch(2, 1), 3);
  const auto recs = random_records(2, 1, 10, 2);
  const std::vector<std::size_t> idx{7, 2, 4};
  const std::vector<SampleRecord> picked{recs[7], recs[2], recs[4]};
  const LossGrad a = sl_loss(p, recs, idx);
  const LossGrad b = sl_loss(p, picked);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad, b.grad);
  EXPECT_NEAR(sl_loss_value(p, recs), sl_loss(p, recs).loss, 1e-15);
}

// ---------------------------------------------------------------------------
// supervised training

TEST(TrainSl, OverfitsOneRecord) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(1, 3);
  SlConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  cfg.lr = 0.01;
  const TrainResult r = train_sl(*ocp, ds, init_params(1, 1, 2), cfg);
  EXPECT_LE(r.log.epochs.back().train_loss, 1e-6);
  EXPECT_EQ(r.log.steps.size(), 500u);
}

TEST(TrainSl, ZeroLearningRateLeavesParams) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(20, 4);
  const MlpParams init = init_params(1, 1, 5);
  SlConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 6;
  cfg.lr = 0.0;
  const TrainResult r = train_sl(*ocp, ds, init, cfg);
  EXPECT_EQ(r.params.theta, init.theta);
  EXPECT_EQ(r.log.steps.size(), 12u);  // ceil(20 / 6) per epoch
}

TEST(TrainSl, SatelliteLossNonIncreasingAtSmallLr) {
  const OcpPtr ocp = satellite_ocp();
  GenerationOptions o;
  o.n_trajectories = 4;
  o.seed = 3;
  const Dataset ds = generate_uniform(*ocp, o);
  SlConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.lr = 1e-3;
  const TrainResult r = train_sl(*ocp, ds, init_params(6, 3, 7), cfg);
  for (std::size_t e = 1; e < r.log.epochs.size(); ++e) {
    EXPECT_LE(r.log.epochs[e].train_loss, r.log.epochs[e - 1].train_loss + 1e-12) << "epoch " << e + 1;
  }
}

TEST(TrainSl, DeterministicAndDecays) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(30, 8);
  Dataset val = scalar_dataset(5, 9);
  SlConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.lr_decay = LrDecay{2, 0.5};
  cfg.seed = 11;
  cfg.validation = &val;
  std::size_t seen = 0;
  cfg.on_epoch = [&](const EpochSummary&) { ++seen; };
  const TrainResult a = train_sl(*ocp, ds, init_params(1, 1, 1), cfg);
  const TrainResult b = train_sl(*ocp, ds, init_params(1, 1, 1), cfg);
  EXPECT_EQ(seen, 12u);
  EXPECT_EQ(a.params.theta, b.params.theta);
  EXPECT_EQ(steps_csv(a.log), steps_csv(b.log));
  EXPECT_EQ(epochs_csv(a.log), epochs_csv(b.log));
  EXPECT_EQ(a.log.steps.front().lr, 0.01);
  EXPECT_EQ(a.log.steps.back().lr, 0.0025);
  EXPECT_TRUE(std::isfinite(a.log.epochs.back().validation_loss));
  cfg.seed = 12;
  const TrainResult c = train_sl(*ocp, ds, init_params(1, 1, 1), cfg);
  EXPECT_NE(a.params.theta, c.params.theta);
}

TEST(TrainSl, RejectsMismatchedNetwork) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(4, 1);
  EXPECT_THROW(train_sl(*ocp, ds, init_params(2, 1, 0), SlConfig{}), Error);
  SlConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(train_sl(*ocp, ds, init_params(1, 1, 0), bad), ConfigError);
}

TEST(TrainLogCsv, Headers) {
  TrainLog log;
  log.steps.push_back({1, "sl", 1, 0.5, 0.01, 0});
  log.epochs.push_back({"sl", 1, 0.5, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_EQ(steps_csv(log).substr(0, steps_csv(log).find('\n')), "step,stage,epoch,loss,lr,dropped");
  EXPECT_EQ(epochs_csv(log).substr(0, epochs_csv(log).find('\n')), "stage,epoch,train_loss,validation_loss");
}

// ---------------------------------------------------------------------------
// direct optimization gradients

TEST(DoGradient, ZeroNetworkScalarCostAndFd) {
  const OcpPtr ocp = unit_problem();
  MlpParams p = init_params(small_arch(1, 1), 1);
  p.theta.setZero();
  const std::vector<Vec> x0{Vec::Ones(1)};
  const DoEval bp = do_loss_and_grad_bp(*ocp, p, x0, tight());
  EXPECT_EQ(bp.mean_cost, 1.0);
  const auto loss = [&](const MlpParams& q) { return do_loss(*ocp, q, x0, tight()); };
  for (Eigen::Index i = 0; i < p.theta.size(); ++i) {
    const Vec e = Vec::Unit(p.theta.size(), i);
    EXPECT_NEAR(bp.grad[i], directional_fd(loss, p, e, 1e-6), 1e-6) << "parameter " << i;
  }
}

TEST(DoGradient, ScalarBpAdjointFdAgree) {
  const OcpPtr ocp = unit_problem();
  const std::vector<Vec> x0{Vec::Constant(1, 1.0), Vec::Constant(1, -0.5)};
  const auto loss = [&](const MlpParams& q) { return do_loss(*ocp, q, x0, tight()); };
  for (std::uint64_t draw = 0; draw < 3; ++draw) {
    const MlpParams p = init_params(small_arch(1, 1), 100 + draw);
    const DoEval bp = do_loss_and_grad_bp(*ocp, p, x0, tight());
    const DoEval adj = do_loss_and_grad_adjoint(*ocp, p, x0, tight());
    EXPECT_NEAR(bp.mean_cost, adj.mean_cost, 1e-8);
    EXPECT_LE((bp.grad - adj.grad).norm(), 1e-4 * bp.grad.norm());
    const Vec v = unit_direction(p.theta.size(), draw);
    const double fd = directional_fd(loss, p, v, 1e-5);
    EXPECT_NEAR(bp.grad.dot(v), fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST(DoGradient, SatelliteShortHorizonAgreement) {
  const OcpPtr ocp = satellite_ocp()->with_horizon(1.0);
  const MlpParams p = init_params(6, 3, 3);
  const auto x0 = sample_initial_states(SatelliteOcp::default_box(), 2, 5);
  const DoEval bp = do_loss_and_grad_bp(*ocp, p, x0, tight());
  const DoEval adj = do_loss_and_grad_adjoint(*ocp, p, x0, tight());
  EXPECT_NEAR(bp.mean_cost, adj.mean_cost, 1e-6 * bp.mean_cost);
  EXPECT_LE((bp.grad - adj.grad).norm(), 1e-3 * bp.grad.norm());
  const auto loss = [&](const MlpParams& q) { return do_loss(*ocp, q, x0, tight()); };
  const Vec v = unit_direction(p.theta.size(), 4);
  const double fd = directional_fd(loss, p, v, 1e-4);
  EXPECT_NEAR(bp.grad.dot(v), fd, 1e-3 * std::abs(fd));
}

TEST(DoGradient, CheckpointSegmentInvariance) {
  const OcpPtr ocp = satellite_ocp()->with_horizon(1.0);
  const MlpParams p = init_params(6, 3, 8);
  const auto x0 = sample_initial_states(SatelliteOcp::default_box(), 3, 1);
  const DoEval bp1 = do_loss_and_grad_bp(*ocp, p, x0, IntegratorSpec{}, 1);
  const DoEval ad1 = do_loss_and_grad_adjoint(*ocp, p, x0, IntegratorSpec{}, 1);
  for (int segs : {2, 8}) {
    const DoEval bp = do_loss_and_grad_bp(*ocp, p, x0, IntegratorSpec{}, segs);
    const DoEval ad = do_loss_and_grad_adjoint(*ocp, p, x0, IntegratorSpec{}, segs);
    EXPECT_EQ(bp.mean_cost, bp1.mean_cost);
    EXPECT_LE((bp.grad - bp1.grad).norm(), 1e-10 * bp1.grad.norm());
    EXPECT_EQ(ad.mean_cost, ad1.mean_cost);
    EXPECT_LE((ad.grad - ad1.grad).norm(), 1e-10 * ad1.grad.norm());
  }
}

TEST(DoGradient, DuplicatedBatchKeepsMean) {
  const OcpPtr ocp = satellite_ocp()->with_horizon(1.0);
  const MlpParams p = init_params(6, 3, 2);
  const Vec x = sample_initial_states(SatelliteOcp::default_box(), 1, 6).front();
  const DoEval one = do_loss_and_grad_bp(*ocp, p, {x}, IntegratorSpec{});
  const DoEval two = do_loss_and_grad_bp(*ocp, p, {x, x}, IntegratorSpec{});
  EXPECT_DOUBLE_EQ(two.mean_cost, one.mean_cost);
  EXPECT_LE((two.grad - one.grad).norm(), 1e-12 * one.grad.norm());
  EXPECT_EQ(two.costs.size(), 2u);
}

TEST(DoGradient, VanishingHorizon) {
  const OcpPtr ocp = unit_problem(1e-10);
  const MlpParams p = init_params(small_arch(1, 1), 5);
  const std::vector<Vec> x0{Vec::Constant(1, 0.8)};
  const DoEval adj = do_loss_and_grad_adjoint(*ocp, p, x0, IntegratorSpec{});
  const DoEval bp = do_loss_and_grad_bp(*ocp, p, x0, IntegratorSpec{});
  EXPECT_NEAR(adj.mean_cost, 0.64, 1e-8);
  EXPECT_LE(adj.grad.norm(), 1e-8);
  EXPECT_LE(bp.grad.norm(), 1e-8);
}

// ---------------------------------------------------------------------------
// direct optimization training

TEST(TrainDo, ZeroIterationsReturnsInit) {
  const OcpPtr ocp = unit_problem();
  const MlpParams init = init_params(small_arch(1, 1), 3);
  DoConfig cfg;
  cfg.iterations = 0;
  const TrainResult r = train_do(*ocp, init, cfg, ocp->init_box());
  EXPECT_EQ(r.params.theta, init.theta);
  EXPECT_TRUE(r.log.steps.empty());
}

TEST(TrainDo, DeterministicAndImproves) {
  const OcpPtr ocp = unit_problem();
  DoConfig cfg;
  cfg.iterations = 40;
  cfg.batch_size = 16;
  cfg.lr = 0.01;
  cfg.seed = 5;
  const MlpParams init = init_params(small_arch(1, 1), 3);
  const TrainResult a = train_do(*ocp, init, cfg, ocp->init_box());
  const TrainResult b = train_do(*ocp, init, cfg, ocp->init_box());
  EXPECT_EQ(a.params.theta, b.params.theta);
  EXPECT_EQ(steps_csv(a.log), steps_csv(b.log));
  ASSERT_EQ(a.log.steps.size(), 40u);
  for (const auto& s : a.log.steps) EXPECT_EQ(s.stage, "do");
  const auto x0 = sample_initial_states(ocp->init_box(), 64, 99);
  EXPECT_LT(do_loss(*ocp, a.params, x0, IntegratorSpec{}), do_loss(*ocp, init, x0, IntegratorSpec{}));
}

TEST(TrainDo, AllDivergedThrows) {
  const OcpPtr ocp = unit_problem();
  MlpParams p = init_params(small_arch(1, 1), 3);
  p.theta.setConstant(std::numeric_limits<double>::quiet_NaN());
  DoConfig cfg;
  cfg.iterations = 1;
  cfg.batch_size = 4;
  EXPECT_THROW(train_do(*ocp, p, cfg, ocp->init_box()), AllRolloutsDiverged);
}

TEST(Finetune, ZeroIterationsEqualsPureSl) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(20, 2);
  const MlpParams init = init_params(small_arch(1, 1), 4);
  SlConfig sl;
  sl.epochs = 5;
  sl.batch_size = 5;
  DoConfig ft;
  ft.iterations = 0;
  ft.lr = 1e-4;
  bool boundary = false;
  const FinetuneResult r = pretrain_finetune(*ocp, ds, init, sl, ft, ocp->init_box(), [&](const MlpParams&) { boundary = true; });
  const TrainResult pure = train_sl(*ocp, ds, init, sl);
  EXPECT_TRUE(boundary);
  EXPECT_EQ(r.finetuned.theta, pure.params.theta);
  EXPECT_EQ(r.pretrained.theta, pure.params.theta);
  EXPECT_EQ(steps_csv(r.log), steps_csv(pure.log));
}

TEST(Finetune, LogsAreConcatenatedWithStageTags) {
  const OcpPtr ocp = unit_problem();
  const Dataset ds = scalar_dataset(10, 2);
  SlConfig sl;
  sl.epochs = 2;
  sl.batch_size = 5;
  DoConfig ft;
  ft.iterations = 3;
  ft.batch_size = 4;
  ft.lr = 1e-4;
  const FinetuneResult r = pretrain_finetune(*ocp, ds, init_params(small_arch(1, 1), 4), sl, ft, ocp->init_box());
  ASSERT_EQ(r.log.steps.size(), 7u);
  for (std::size_t i = 0; i < r.log.steps.size(); ++i) {
    EXPECT_EQ(r.log.steps[i].step, i + 1);
    EXPECT_EQ(r.log.steps[i].stage, i < 4 ? "sl" : "finetune");
  }
  EXPECT_NE(r.finetuned.theta, r.pretrained.theta);
}

// ---------------------------------------------------------------------------
// landscape

TEST(Landscape, QuadraticHasUnitBeta) {
  const LossAndGrad quad = [](const Vec& th) { return LossGrad{0.5 * th.squaredNorm(), th}; };
  const Vec theta = unit_direction(50, 3) * 4.0;
  for (const auto& scales : {log_scales(0.01, 100.0, 9), log_scales(0.01, 0.1, 5), std::vector<double>{0.5}}) {
    const LandscapeReport rep = landscape_probe(quad, theta, 0.1, scales);
    EXPECT_NEAR(rep.effective_beta, 1.0, 1e-10);
    for (const auto& pt : rep.points) {
      EXPECT_NEAR(pt.grad_change / pt.distance, 1.0, 1e-10);
      EXPECT_NEAR(pt.distance, pt.scale * 0.1 * theta.norm(), 1e-12);
    }
  }
}

TEST(Landscape, ZeroScaleIsTheBasePoint) {
  const LossAndGrad quad = [](const Vec& th) { return LossGrad{0.5 * th.squaredNorm(), th}; };
  const LandscapeReport rep = landscape_probe(quad, Vec::Ones(4), 0.1, {0.0});
  ASSERT_EQ(rep.points.size(), 1u);
  EXPECT_EQ(rep.points[0].distance, 0.0);
  EXPECT_EQ(rep.points[0].grad_change, 0.0);
  EXPECT_EQ(rep.points[0].loss, rep.base_loss);
  EXPECT_EQ(rep.relative_envelope(), 0.0);
}

TEST(Landscape, NonFiniteProbeIsRecorded) {
  const LandscapeReport up = landscape_probe(
      [](const Vec& th) {
        if (th[0] < 0.0) throw NonFiniteLoss("probe");
        return LossGrad{0.5 * th.squaredNorm(), th};
      },
      Vec::Ones(1), 1.0, {0.5, 2.0});
  EXPECT_TRUE(up.any_nonfinite);
  EXPECT_TRUE(up.points[0].finite);
  EXPECT_FALSE(up.points[1].finite);
  EXPECT_EQ(up.loss_max, std::numeric_limits<double>::infinity());
  EXPECT_NEAR(up.effective_beta, 1.0, 1e-12);
}

TEST(Landscape, ScaleGrids) {
  const auto s = log_scales(0.01, 100.0, 5);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_DOUBLE_EQ(s.front(), 0.01);
  EXPECT_DOUBLE_EQ(s[2], 1.0);
  EXPECT_DOUBLE_EQ(s.back(), 100.0);
  EXPECT_THROW(landscape_probe([](const Vec& th) { return LossGrad{0.0, th}; }, Vec::Ones(1), 0.1, {}), ConfigError);
}
