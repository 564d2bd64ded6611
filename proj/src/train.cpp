#include "ocnet/train.hpp"

#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ocnet {

// ---------------------------------------------------------------------------
// supervised learning

namespace {

Mat batch_inputs(const MlpArch& a, const std::vector<SampleRecord>& recs, std::span<const std::size_t> idx, Mat& target) {
  const auto B = static_cast<Eigen::Index>(idx.size());
  Mat in(a.input_dim(), B);
  target.resize(a.control_dim, B);
  const int off = a.time_input ? 1 : 0;
  for (Eigen::Index j = 0; j < B; ++j) {
    const SampleRecord& r = recs[idx[static_cast<std::size_t>(j)]];
    if (r.x.size() != a.state_dim || r.u.size() != a.control_dim) throw SchemaMismatch("record dimensions do not match the network");
    if (off) in(0, j) = r.t;
    in.col(j).tail(a.state_dim) = r.x;
    target.col(j) = r.u;
  }
  return in;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace

LossGrad sl_loss(const MlpParams& params, const std::vector<SampleRecord>& records, std::span<const std::size_t> batch) {
  if (batch.empty()) throw ConfigError("sl_loss needs a nonempty batch");
  Mat target;
  const Mat in = batch_inputs(params.arch, records, batch, target);
  ForwardCache cache;
  const Mat r = forward_batch(params, in, cache) - target;
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossGrad out;
  out.loss = r.squaredNorm() * inv;
  out.grad = backward_cached(params, cache, (2.0 * inv) * r);
  return out;
}

LossGrad sl_loss(const MlpParams& params, std::span<const SampleRecord> batch) {
  const std::vector<SampleRecord> recs(batch.begin(), batch.end());
  const auto idx = iota_indices(recs.size());
  return sl_loss(params, recs, idx);
}

double sl_loss_value(const MlpParams& params, const std::vector<SampleRecord>& records) {
  if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t chunk = 4096;
  double sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    idx.resize(std::min(chunk, records.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Mat target;
    const Mat in = batch_inputs(params.arch, records, idx, target);
    sum += (forward_batch(params, in) - target).squaredNorm();
  }
  return sum / static_cast<double>(records.size());
}

void SlConfig::validate() const {
  if (batch_size < 1) throw ConfigError("sl batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("sl lr must be >= 0");
  if (lr_decay) {
    if (lr_decay->every_n_epochs < 1) throw ConfigError("lr_decay.every_n_epochs must be >= 1");
    if (!(lr_decay->factor > 0.0 && lr_decay->factor <= 1.0)) throw ConfigError("lr_decay.factor must lie in (0, 1]");
  }
}

void TrainLog::append(const TrainLog& other) {
  const std::size_t offset = steps.empty() ? 0 : steps.back().step;
  for (TrainStep s : other.steps) {
    s.step += offset;
    steps.push_back(std::move(s));
  }
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
  wall_seconds += other.wall_seconds;
}

std::string steps_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "step,stage,epoch,loss,lr,dropped\n";
  for (const auto& s : log.steps) {
    os << s.step << ',' << s.stage << ',' << s.epoch << ',' << format_double(s.loss) << ',' << format_double(s.lr) << ','
       << s.dropped << '\n';
  }
  return os.str();
}

std::string epochs_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "stage,epoch,train_loss,validation_loss\n";
  for (const auto& e : log.epochs) {
    os << e.stage << ',' << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.validation_loss)
       << '\n';
  }
  return os.str();
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_network(const Ocp& ocp, const MlpParams& p) {
  if (p.arch.state_dim != ocp.state_dim() || p.arch.control_dim != ocp.control_dim()) {
    throw SchemaMismatch("network is " + std::to_string(p.arch.state_dim) + " -> " + std::to_string(p.arch.control_dim) +
                         " but " + ocp.name() + " is " + std::to_string(ocp.state_dim()) + " -> " +
                         std::to_string(ocp.control_dim()));
  }
  if (static_cast<std::size_t>(p.theta.size()) != p.arch.param_count()) throw ConfigError("parameter vector has the wrong size");
}

}  // namespace

TrainResult train_sl(const Ocp& ocp, const Dataset& data, const MlpParams& init, const SlConfig& cfg) {
  cfg.validate();
  check_network(ocp, init);
  if (data.meta.state_dim != ocp.state_dim() || data.meta.control_dim != ocp.control_dim()) {
    throw SchemaMismatch("dataset dimensions do not match " + ocp.name());
  }
  if (data.records.empty()) throw ConfigError("cannot train on an empty dataset");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = init;
  res.optimizer = AdamState(static_cast<std::size_t>(init.theta.size()), cfg.lr);
  res.log.seed = cfg.seed;
  const std::size_t N = data.records.size();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    if (cfg.lr_decay) lr *= std::pow(cfg.lr_decay->factor, static_cast<double>((epoch - 1) / cfg.lr_decay->every_n_epochs));
    res.optimizer.lr = lr;
    const auto perm = shuffled_indices(N, derive_seed(cfg.seed, epoch));
    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::span<const std::size_t> idx(perm.data() + start, std::min(cfg.batch_size, N - start));
      const LossGrad lg = sl_loss(res.params, data.records, idx);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
        throw NonFiniteLoss("supervised loss became non-finite at epoch " + std::to_string(epoch));
      }
      adam_step(res.optimizer, res.params, lg.grad);
      res.log.steps.push_back({++step, "sl", epoch, lg.loss, lr, 0});
    }
    EpochSummary e;
    e.stage = "sl";
    e.epoch = epoch;
    e.train_loss = sl_loss_value(res.params, data.records);
    e.validation_loss = cfg.validation ? sl_loss_value(res.params, cfg.validation->records)
                                       : std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(e.train_loss)) throw NonFiniteLoss("supervised loss became non-finite at epoch " + std::to_string(epoch));
    res.log.epochs.push_back(e);
    if (cfg.on_epoch) cfg.on_epoch(e);
  }
  res.log.wall_seconds = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------
// batched rollouts

namespace {

// Column j of the (n+1) x B joint state is (x_j, accumulated running cost).
class BatchSystem {
 public:
  BatchSystem(const Ocp& ocp, const MlpParams& p, Eigen::Index batch)
      : ocp_(ocp), p_(p), n_(ocp.state_dim()), B_(batch) {}

  Eigen::Index n() const { return n_; }
  Eigen::Index batch() const { return B_; }
  Eigen::Index size() const { return (n_ + 1) * B_; }

  struct Stage {
    Vec y;
    ForwardCache cache;
    Mat u;
  };

  Mat inputs(double t, const Eigen::Ref<const Mat>& X) const {
    Mat in(p_.arch.input_dim(), B_);
    if (p_.arch.time_input) in.row(0).setConstant(t);
    in.bottomRows(n_) = X;
    return in;
  }

  Vec eval(double t, const Vec& y) const {
    Eigen::Map<const Mat> Y(y.data(), n_ + 1, B_);
    const Mat U = forward_batch(p_, inputs(t, Y.topRows(n_)));
    return slopes(Y, U);
  }

  Vec eval_cached(double t, const Vec& y, Stage& st) const {
    st.y = y;
    Eigen::Map<const Mat> Y(st.y.data(), n_ + 1, B_);
    st.u = forward_batch(p_, inputs(t, Y.topRows(n_)), st.cache);
    return slopes(Y, st.u);
  }

  /// Upstream on the stage slope -> upstream on the stage input; adds the
  /// parameter part to `g`.
  Vec vjp(const Stage& st, const Vec& kbar, Vec& g) const {
    Eigen::Map<const Mat> Y(st.y.data(), n_ + 1, B_), KB(kbar.data(), n_ + 1, B_);
    Vec ybar = Vec::Zero(size());
    Eigen::Map<Mat> YB(ybar.data(), n_ + 1, B_);
    Mat ubar(ocp_.control_dim(), B_);
    for (Eigen::Index j = 0; j < B_; ++j) {
      const Vec x = Y.col(j).head(n_);
      const Vec u = st.u.col(j);
      const Vec xb = KB.col(j).head(n_);
      const double cb = KB(n_, j);
      ubar.col(j) = ocp_.dynamics_du(x, u).transpose() * xb + cb * ocp_.running_cost_du(x, u);
      YB.col(j).head(n_) = ocp_.dynamics_dx(x, u).transpose() * xb + cb * ocp_.running_cost_dx(x, u);
    }
    Mat din;
    g += backward_cached(p_, st.cache, ubar, &din);
    YB.topRows(n_) += din.bottomRows(n_);
    return ybar;
  }

  /// Adjoint right-hand side in reversed time; `z` = (alpha columns, g).
  Vec adjoint_rhs(double t, const Mat& X, const Vec& z, double weight) const {
    ForwardCache cache;
    const Mat U = forward_batch(p_, inputs(t, X), cache);
    Eigen::Map<const Mat> A(z.data(), n_, B_);
    Vec dz(z.size());
    Eigen::Map<Mat> DA(dz.data(), n_, B_);
    Mat ubar(ocp_.control_dim(), B_);
    for (Eigen::Index j = 0; j < B_; ++j) {
      const Vec x = X.col(j);
      const Vec u = U.col(j);
      const Vec a = A.col(j);
      ubar.col(j) = ocp_.dynamics_du(x, u).transpose() * a + weight * ocp_.running_cost_du(x, u);
      DA.col(j) = ocp_.dynamics_dx(x, u).transpose() * a + weight * ocp_.running_cost_dx(x, u);
    }
    Mat din;
    dz.tail(z.size() - n_ * B_) = backward_cached(p_, cache, ubar, &din);
    DA += din.bottomRows(n_);
    return dz;
  }

  Vec initial(const std::vector<Vec>& x0) const {
    Vec y(size());
    Eigen::Map<Mat> Y(y.data(), n_ + 1, B_);
    for (Eigen::Index j = 0; j < B_; ++j) {
      const Vec& x = x0[static_cast<std::size_t>(j)];
      if (x.size() != n_) throw ConfigError("initial state has the wrong dimension");
      if (!x.allFinite()) throw NonFiniteState("initial state is not finite");
      Y.col(j).head(n_) = x;
      Y(n_, j) = 0.0;
    }
    return y;
  }

  std::vector<double> costs(const Vec& yT) const {
    Eigen::Map<const Mat> Y(yT.data(), n_ + 1, B_);
    std::vector<double> c(static_cast<std::size_t>(B_));
    for (Eigen::Index j = 0; j < B_; ++j) c[static_cast<std::size_t>(j)] = Y(n_, j) + ocp_.terminal_cost(Y.col(j).head(n_));
    return c;
  }

  /// d mean / d y(T).
  Vec terminal_upstream(const Vec& yT) const {
    Eigen::Map<const Mat> Y(yT.data(), n_ + 1, B_);
    Vec ybar(size());
    Eigen::Map<Mat> YB(ybar.data(), n_ + 1, B_);
    const double w = 1.0 / static_cast<double>(B_);
    for (Eigen::Index j = 0; j < B_; ++j) {
      YB.col(j).head(n_) = w * ocp_.terminal_cost_dx(Y.col(j).head(n_));
      YB(n_, j) = w;
    }
    return ybar;
  }

  VectorField field() const {
    return [this](double t, const Vec& y) { return eval(t, y); };
  }

 private:
  Vec slopes(const Eigen::Map<const Mat>& Y, const Mat& U) const {
    Vec dy(size());
    Eigen::Map<Mat> D(dy.data(), n_ + 1, B_);
    for (Eigen::Index j = 0; j < B_; ++j) {
      const Vec x = Y.col(j).head(n_);
      const Vec u = U.col(j);
      D.col(j).head(n_) = ocp_.dynamics(x, u);
      D(n_, j) = ocp_.running_cost(x, u);
    }
    return dy;
  }

  const Ocp& ocp_;
  const MlpParams& p_;
  Eigen::Index n_;
  Eigen::Index B_;
};

struct ForwardPass {
  IvpResult ivp;
  std::vector<double> costs;
  double mean = 0.0;
};

ForwardPass forward_pass(const BatchSystem& sys, const Ocp& ocp, const std::vector<Vec>& x0, const IntegratorSpec& integ) {
  ForwardPass fw;
  fw.ivp = integrate_ivp(sys.field(), sys.initial(x0), 0.0, ocp.horizon(), integ);
  fw.costs = sys.costs(fw.ivp.final_state());
  double sum = 0.0;
  for (double c : fw.costs) sum += c;
  fw.mean = sum / static_cast<double>(fw.costs.size());
  if (!std::isfinite(fw.mean)) throw NonFiniteState("rollout cost is not finite");
  return fw;
}

void check_batch(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0) {
  check_network(ocp, params);
  if (x0.empty()) throw ConfigError("direct optimization needs a nonempty batch");
}

// Segment s covers records [begin(s), begin(s + 1)).
struct Segmentation {
  std::vector<std::size_t> begin;

  Segmentation(std::size_t records, int segments) {
    if (segments < 1) throw ConfigError("checkpoint_segments must be >= 1");
    const std::size_t S = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(segments), records));
    for (std::size_t s = 0; s <= S; ++s) begin.push_back(s * records / S);
  }
  std::size_t count() const { return begin.size() - 1; }
};

// Keeps only the states at segment starts, as the checkpointed sweeps
// re-derive everything else.
std::vector<Vec> take_checkpoints(std::vector<StepRecord>& recs, const Segmentation& seg) {
  std::vector<Vec> cps;
  for (std::size_t s = 0; s < seg.count(); ++s) cps.push_back(recs[seg.begin[s]].x);
  for (auto& r : recs) r.x = Vec();
  return cps;
}

struct StepCache {
  double t = 0.0;
  double h = 0.0;
  std::vector<BatchSystem::Stage> stages;
};

// Same arithmetic as rk_step, keeping each stage's activations.
Vec cached_step(const BatchSystem& sys, const Tableau& tab, double t, const Vec& x, double h, StepCache& sc) {
  const int used = tab.fsal ? tab.stages - 1 : tab.stages;
  sc.t = t;
  sc.h = h;
  sc.stages.resize(static_cast<std::size_t>(used));
  std::vector<Vec> k(static_cast<std::size_t>(used));
  k[0] = sys.eval_cached(t, x, sc.stages[0]);
  for (int i = 1; i < used; ++i) {
    Vec y = x;
    const auto& row = tab.a[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] != 0.0) y += (h * row[j]) * k[j];
    }
    k[static_cast<std::size_t>(i)] = sys.eval_cached(t + tab.c[static_cast<std::size_t>(i)] * h, y, sc.stages[static_cast<std::size_t>(i)]);
  }
  Vec x_next = x;
  const auto& w = tab.fsal ? tab.a.back() : tab.b;
  for (std::size_t j = 0; j < static_cast<std::size_t>(used) && j < w.size(); ++j) {
    if (w[j] != 0.0) x_next += (h * w[j]) * k[j];
  }
  if (!x_next.allFinite()) throw NonFiniteState("non-finite state while replaying a rollout");
  return x_next;
}

Vec reverse_step(const BatchSystem& sys, const Tableau& tab, const StepCache& sc, const Vec& ybar_next, Vec& g) {
  const auto used = sc.stages.size();
  const double h = sc.h;
  const auto& w = tab.fsal ? tab.a.back() : tab.b;
  std::vector<Vec> kbar(used);
  for (std::size_t j = 0; j < used; ++j) {
    const double wj = j < w.size() ? w[j] : 0.0;
    kbar[j] = (h * wj) * ybar_next;
  }
  Vec xbar = ybar_next;
  for (std::size_t i = used; i-- > 0;) {
    if (kbar[i].isZero(0.0)) continue;
    const Vec yb = sys.vjp(sc.stages[i], kbar[i], g);
    xbar += yb;
    const auto& row = tab.a[i];
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] != 0.0) kbar[j] += (h * row[j]) * yb;
    }
  }
  return xbar;
}

// Replays one segment with the integrator kernel; returns node states and slopes.
struct SegmentTrace {
  std::size_t segment = static_cast<std::size_t>(-1);
  std::vector<Vec> states;
  std::vector<Vec> slopes;
};

void replay_segment(const BatchSystem& sys, const Tableau& tab, const std::vector<StepRecord>& recs,
                    const Segmentation& seg, const std::vector<Vec>& cps, std::size_t s, SegmentTrace& out) {
  const VectorField f = sys.field();
  out.segment = s;
  out.states.clear();
  out.slopes.clear();
  Vec y = cps[s];
  Vec k1 = f(recs[seg.begin[s]].t, y);
  out.states.push_back(y);
  out.slopes.push_back(k1);
  for (std::size_t r = seg.begin[s]; r < seg.begin[s + 1]; ++r) {
    Vec k_last;
    Vec y_next = rk_step(tab, f, recs[r].t, y, recs[r].h, &k1, nullptr, nullptr, tab.fsal ? &k_last : nullptr);
    if (!y_next.allFinite()) throw NonFiniteState("non-finite state while replaying a rollout");
    k1 = tab.fsal ? std::move(k_last) : f(recs[r].t + recs[r].h, y_next);
    y = std::move(y_next);
    out.states.push_back(y);
    out.slopes.push_back(k1);
  }
}

Vec hermite(double t, double t0, double h, const Vec& x0, const Vec& x1, const Vec& f0, const Vec& f1) {
  const double s = (t - t0) / h;
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * x0 + (s3 - 2 * s2 + s) * h * f0 + (-2 * s3 + 3 * s2) * x1 + (s3 - s2) * h * f1;
}

}  // namespace

double do_loss(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0, const IntegratorSpec& integ,
               std::vector<double>* costs) {
  check_batch(ocp, params, x0);
  const BatchSystem sys(ocp, params, static_cast<Eigen::Index>(x0.size()));
  ForwardPass fw = forward_pass(sys, ocp, x0, integ);
  if (costs) *costs = fw.costs;
  return fw.mean;
}

DoEval do_loss_and_grad_bp(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0,
                           const IntegratorSpec& integ, int checkpoint_segments) {
  check_batch(ocp, params, x0);
  const BatchSystem sys(ocp, params, static_cast<Eigen::Index>(x0.size()));
  ForwardPass fw = forward_pass(sys, ocp, x0, integ);
  auto& recs = fw.ivp.step_records;
  const Segmentation seg(recs.size(), checkpoint_segments);
  const std::vector<Vec> cps = take_checkpoints(recs, seg);
  const Tableau& tab = tableau(fw.ivp.scheme);

  DoEval out;
  out.mean_cost = fw.mean;
  out.costs = fw.costs;
  out.n_steps = recs.size();
  out.grad = Vec::Zero(params.theta.size());
  Vec ybar = sys.terminal_upstream(fw.ivp.final_state());
  std::vector<StepCache> caches;
  for (std::size_t s = seg.count(); s-- > 0;) {
    const std::size_t b0 = seg.begin[s], b1 = seg.begin[s + 1];
    caches.assign(b1 - b0, StepCache{});
    Vec y = cps[s];
    for (std::size_t r = b0; r < b1; ++r) y = cached_step(sys, tab, recs[r].t, y, recs[r].h, caches[r - b0]);
    for (std::size_t r = b1; r-- > b0;) ybar = reverse_step(sys, tab, caches[r - b0], ybar, out.grad);
  }
  if (!out.grad.allFinite()) throw NonFiniteState("non-finite gradient");
  return out;
}

DoEval do_loss_and_grad_adjoint(const Ocp& ocp, const MlpParams& params, const std::vector<Vec>& x0,
                                const IntegratorSpec& integ, int checkpoint_segments) {
  check_batch(ocp, params, x0);
  const auto B = static_cast<Eigen::Index>(x0.size());
  const BatchSystem sys(ocp, params, B);
  ForwardPass fw = forward_pass(sys, ocp, x0, integ);
  auto& recs = fw.ivp.step_records;
  const Segmentation seg(recs.size(), checkpoint_segments);
  const std::vector<Vec> cps = take_checkpoints(recs, seg);
  const Tableau& tab = tableau(fw.ivp.scheme);
  const double T = ocp.horizon();
  const Eigen::Index n = sys.n();

  std::vector<double> starts(recs.size());
  for (std::size_t r = 0; r < recs.size(); ++r) starts[r] = recs[r].t;
  // two most recent segments; the backward sweep moves through them in order
  SegmentTrace trace[2];
  std::size_t oldest = 0;
  auto states_at = [&](double t) -> Mat {
    std::size_t r = static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), t) - starts.begin());
    r = r == 0 ? 0 : std::min(r - 1, recs.size() - 1);
    const std::size_t s = static_cast<std::size_t>(std::upper_bound(seg.begin.begin(), seg.begin.end() - 1, r) - seg.begin.begin()) - 1;
    SegmentTrace* tr = trace[0].segment == s ? &trace[0] : trace[1].segment == s ? &trace[1] : nullptr;
    if (!tr) {
      tr = &trace[oldest];
      oldest ^= 1;
      replay_segment(sys, tab, recs, seg, cps, s, *tr);
    }
    const std::size_t i = r - seg.begin[s];
    const Vec y = hermite(std::clamp(t, recs[r].t, recs[r].t + recs[r].h), recs[r].t, recs[r].h, tr->states[i],
                          tr->states[i + 1], tr->slopes[i], tr->slopes[i + 1]);
    return Eigen::Map<const Mat>(y.data(), n + 1, B).topRows(n);
  };

  const double weight = 1.0 / static_cast<double>(B);
  const Eigen::Index P = params.theta.size();
  Vec z0 = Vec::Zero(n * B + P);
  {
    const Vec ybar = sys.terminal_upstream(fw.ivp.final_state());
    Eigen::Map<const Mat> YB(ybar.data(), n + 1, B);
    Eigen::Map<Mat>(z0.data(), n, B) = YB.topRows(n);
  }
  const VectorField back = [&](double s, const Vec& z) { return sys.adjoint_rhs(T - s, states_at(T - s), z, weight); };
  IntegratorSpec bspec = integ;
  bspec.initial_step.reset();
  const IvpResult adj = integrate_ivp(back, z0, 0.0, T, bspec);

  DoEval out;
  out.mean_cost = fw.mean;
  out.costs = fw.costs;
  out.n_steps = recs.size();
  out.grad = adj.final_state().tail(P);
  if (!out.grad.allFinite()) throw NonFiniteState("non-finite gradient");
  return out;
}

void DoConfig::validate() const {
  if (batch_size < 1) throw ConfigError("do batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("do lr must be >= 0");
  if (checkpoint_segments < 1) throw ConfigError("checkpoint_segments must be >= 1");
  integ.validate();
}

namespace {

bool is_divergence(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const NonFiniteState&) {
    return true;
  } catch (const GimbalLock&) {
    return true;
  } catch (const StepLimitExceeded&) {
    return true;
  } catch (...) {
    return false;
  }
}

DoEval eval_mode(const Ocp& ocp, const MlpParams& p, const std::vector<Vec>& x0, const DoConfig& cfg) {
  return cfg.gradient_mode == GradientMode::AdjointOde
             ? do_loss_and_grad_adjoint(ocp, p, x0, cfg.integ, cfg.checkpoint_segments)
             : do_loss_and_grad_bp(ocp, p, x0, cfg.integ, cfg.checkpoint_segments);
}

// Evaluates the batch; members that cannot be rolled out on their own are dropped.
DoEval robust_eval(const Ocp& ocp, const MlpParams& p, const std::vector<Vec>& x0, const DoConfig& cfg,
                   std::size_t& dropped) {
  dropped = 0;
  try {
    return eval_mode(ocp, p, x0, cfg);
  } catch (...) {
    if (!is_divergence(std::current_exception())) throw;
  }
  std::vector<Vec> kept;
  for (const Vec& x : x0) {
    try {
      do_loss(ocp, p, {x}, cfg.integ);
      kept.push_back(x);
    } catch (...) {
      if (!is_divergence(std::current_exception())) throw;
    }
  }
  dropped = x0.size() - kept.size();
  if (kept.empty()) throw AllRolloutsDiverged("all " + std::to_string(x0.size()) + " rollouts in the batch diverged");
  try {
    return eval_mode(ocp, p, kept, cfg);
  } catch (...) {
    if (!is_divergence(std::current_exception())) throw;
  }
  // the shared step sequence of the joint system can still trip over a member
  // that is fine on its own; fall back to independent rollouts
  DoEval out;
  out.grad = Vec::Zero(p.theta.size());
  std::size_t ok = 0;
  for (const Vec& x : kept) {
    try {
      const DoEval one = eval_mode(ocp, p, {x}, cfg);
      out.mean_cost += one.mean_cost;
      out.grad += one.grad;
      out.costs.push_back(one.mean_cost);
      out.n_steps += one.n_steps;
      ++ok;
    } catch (...) {
      if (!is_divergence(std::current_exception())) throw;
    }
  }
  dropped = x0.size() - ok;
  if (ok == 0) throw AllRolloutsDiverged("all " + std::to_string(x0.size()) + " rollouts in the batch diverged");
  out.mean_cost /= static_cast<double>(ok);
  out.grad /= static_cast<double>(ok);
  return out;
}

}  // namespace

TrainResult train_do(const Ocp& ocp, const MlpParams& init, const DoConfig& cfg, const InitBox& box,
                     const std::string& stage) {
  cfg.validate();
  check_network(ocp, init);
  if (box.dim() != ocp.state_dim()) throw ConfigError("initial-state box has the wrong dimension");
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = init;
  res.optimizer = AdamState(static_cast<std::size_t>(init.theta.size()), cfg.lr);
  res.log.seed = cfg.seed;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    const auto x0 = sample_initial_states(box, cfg.batch_size, derive_seed(cfg.seed, it));
    std::size_t dropped = 0;
    const DoEval ev = robust_eval(ocp, res.params, x0, cfg, dropped);
    if (!std::isfinite(ev.mean_cost) || !ev.grad.allFinite()) {
      throw NonFiniteLoss("direct-optimization loss became non-finite at iteration " + std::to_string(it));
    }
    adam_step(res.optimizer, res.params, ev.grad);
    res.log.steps.push_back({it, stage, 0, ev.mean_cost, cfg.lr, dropped});
    if (cfg.on_step) cfg.on_step(res.log.steps.back());
  }
  res.log.wall_seconds = seconds_since(t0);
  return res;
}

FinetuneResult pretrain_finetune(const Ocp& ocp, const Dataset& data, const MlpParams& init, const SlConfig& sl,
                                 const DoConfig& ft, const InitBox& box,
                                 const std::function<void(const MlpParams&)>& on_boundary) {
  sl.validate();
  ft.validate();
  TrainResult stage1 = train_sl(ocp, data, init, sl);
  if (on_boundary) on_boundary(stage1.params);
  TrainResult stage2 = train_do(ocp, stage1.params, ft, box, "finetune");
  FinetuneResult out;
  out.pretrained = std::move(stage1.params);
  out.finetuned = std::move(stage2.params);
  out.optimizer = std::move(stage2.optimizer);
  out.log = std::move(stage1.log);
  out.log.append(stage2.log);
  return out;
}

// ---------------------------------------------------------------------------
// landscape probes

double LandscapeReport::relative_envelope() const { return (loss_max - loss_min) / base_loss; }

LandscapeReport landscape_probe(const LossAndGrad& loss_and_grad, const Vec& theta_hat, double lr,
                                const std::vector<double>& scales) {
  if (scales.empty()) throw ConfigError("landscape probe needs at least one scale");
  for (double s : scales) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("landscape scales must be finite and >= 0");
  }
  LandscapeReport rep;
  rep.lr = lr;
  const LossGrad base = loss_and_grad(theta_hat);
  if (!std::isfinite(base.loss) || !base.grad.allFinite()) throw NonFiniteLoss("loss at the probe centre is not finite");
  rep.base_loss = base.loss;
  rep.base_grad_norm = base.grad.norm();
  rep.loss_min = rep.loss_max = base.loss;
  for (double scale : scales) {
    LandscapePoint pt;
    pt.scale = scale;
    const Vec theta = theta_hat - (scale * lr) * base.grad;
    const Vec delta = theta - theta_hat;
    pt.distance = delta.norm();
    try {
      const LossGrad lg = loss_and_grad(theta);
      pt.loss = lg.loss;
      pt.finite = std::isfinite(lg.loss) && lg.grad.allFinite();
      if (pt.finite) pt.grad_change = (lg.grad - base.grad).norm();
    } catch (const Error&) {
      pt.finite = false;
    }
    if (!pt.finite) {
      pt.loss = std::numeric_limits<double>::infinity();
      pt.grad_change = std::numeric_limits<double>::infinity();
      rep.any_nonfinite = true;
      rep.loss_max = std::numeric_limits<double>::infinity();
    } else {
      rep.loss_min = std::min(rep.loss_min, pt.loss);
      rep.loss_max = std::max(rep.loss_max, pt.loss);
      if (pt.distance > 0.0) rep.effective_beta = std::max(rep.effective_beta, pt.grad_change / pt.distance);
    }
    rep.points.push_back(pt);
  }
  return rep;
}

std::vector<double> log_scales(double lo, double hi, std::size_t count) {
  if (!(lo > 0.0) || !(hi >= lo) || count < 1) throw ConfigError("log_scales needs 0 < lo <= hi and count >= 1");
  std::vector<double> out;
  if (count == 1) return {lo};
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(i == 0 ? lo : i + 1 == count ? hi : std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1)));
  }
  return out;
}

std::string landscape_csv(const LandscapeReport& r) {
  std::ostringstream os;
  os << "# base_loss=" << format_double(r.base_loss) << " lr=" << format_double(r.lr)
     << " effective_beta=" << format_double(r.effective_beta) << " loss_min=" << format_double(r.loss_min)
     << " loss_max=" << format_double(r.loss_max) << " any_nonfinite=" << (r.any_nonfinite ? 1 : 0) << '\n';
  os << "scale,loss,grad_change,distance,finite\n";
  for (const auto& p : r.points) {
    os << format_double(p.scale) << ',' << format_double(p.loss) << ',' << format_double(p.grad_change) << ','
       << format_double(p.distance) << ',' << (p.finite ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace ocnet
