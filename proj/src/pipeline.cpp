#include "ocnet/pipeline.hpp"

#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/rng.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

namespace ocnet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// seed streams, so stages sharing the master seed still draw independent numbers
constexpr std::uint64_t kHoldoutStream = 101;
constexpr std::uint64_t kInterimStream = 200;
constexpr std::uint64_t kNoiseStream = 300;
constexpr std::uint64_t kLandscapeStream = 400;

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_manifest(const ExperimentConfig& cfg, const std::string& command, CommandResult& r) {
  json m;
  m["tool"] = "ocnet";
  m["version"] = kToolVersion;
  m["command"] = command;
  m["config"] = json::parse(config_json(cfg));
  m["artifacts"] = r.artifacts;
  json results = json::object();
  for (const auto& [k, v] : r.results) results[k] = finite_or_null(v);
  m["results"] = results;
  m["seconds"] = r.seconds;
  r.manifest_path = RunLayout{cfg.out_dir}.manifest(command);
  write_file_atomic(r.manifest_path, m.dump(2) + "\n");
}

void require(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifact(what + " not found at " + path);
}

Dataset load_training_data(const ExperimentConfig& cfg, const std::string& path) {
  require(path, "dataset (run gen-data first)");
  Dataset ds = read_dataset(path);
  if (ds.meta.problem != cfg.problem) {
    throw SchemaMismatch(path + " holds " + ds.meta.problem + " data, config is for " + cfg.problem);
  }
  return ds;
}

MlpParams starting_params(const ExperimentConfig& cfg, const std::optional<std::string>& checkpoint) {
  if (checkpoint) {
    const MlpArch a = cfg.arch();
    return load_checkpoint(*checkpoint, cfg.problem, a.state_dim, a.control_dim).params;
  }
  return init_params(cfg.arch(), cfg.seed);
}

void save_stage(const ExperimentConfig& cfg, const std::string& stage, const MlpParams& params,
                const std::optional<AdamState>& optimizer, CommandResult& r) {
  Checkpoint ck;
  ck.meta.problem = cfg.problem;
  ck.meta.horizon = cfg.horizon;
  ck.meta.seed = cfg.seed;
  ck.meta.stage = stage;
  ck.params = params;
  ck.optimizer = optimizer;
  const std::string path = RunLayout{cfg.out_dir}.checkpoint(stage);
  save_checkpoint(path, ck);
  r.artifacts[stage + "_checkpoint"] = path;
}

void save_logs(const ExperimentConfig& cfg, const std::string& stage, const TrainLog& log, CommandResult& r) {
  const RunLayout out{cfg.out_dir};
  write_file_atomic(out.steps_log(stage), steps_csv(log));
  r.artifacts[stage + "_steps_log"] = out.steps_log(stage);
  if (!log.epochs.empty()) {
    write_file_atomic(out.epochs_log(stage), epochs_csv(log));
    r.artifacts[stage + "_epochs_log"] = out.epochs_log(stage);
  }
}

void record_sl_results(const TrainLog& log, CommandResult& r) {
  if (log.epochs.empty()) return;
  r.results["final_train_loss"] = log.epochs.back().train_loss;
  r.results["final_validation_loss"] = log.epochs.back().validation_loss;
}

std::string sigma_tag(double sigma) { return format_double(sigma); }

}  // namespace

std::string RunLayout::stats(const std::string& tag, double sigma) const {
  return dir + "/stats_" + tag + "_sigma" + sigma_tag(sigma) + ".json";
}

std::string RunLayout::cdf(const std::string& tag, double sigma) const {
  return dir + "/cdf_" + tag + "_sigma" + sigma_tag(sigma) + ".csv";
}

CommandResult cmd_gen_data(const ExperimentConfig& cfg, std::vector<SolvedTrajectory>* solutions) {
  cfg.validate();
  const RunLayout out{cfg.out_dir};
  const OcpPtr ocp = cfg.make_ocp();
  CommandResult r;
  GenerationOptions o;
  o.n_trajectories = cfg.dataset.n_trajectories;
  o.nodes_per_trajectory = cfg.dataset.nodes_per_trajectory;
  o.seed = cfg.seed;
  o.solver = cfg.bvp;
  o.workers = cfg.workers;
  o.max_failure_fraction = cfg.dataset.max_failure_fraction;

  Stopwatch sw;
  Dataset ds;
  if (cfg.dataset.sampling == "adaptive") {
    const InterimTrainer trainer = [&](const Dataset& accumulated, std::size_t round) {
      SlConfig sl = cfg.sl;
      sl.seed = derive_seed(cfg.seed, kInterimStream + round);
      return train_sl(*ocp, accumulated, init_params(cfg.arch(), sl.seed), sl).params;
    };
    ds = generate_adaptive(*ocp, AdaptiveGrid{cfg.dataset.grid}, o, trainer, cfg.rollout, solutions);
  } else {
    ds = generate_uniform(*ocp, o, solutions);
  }
  r.seconds["dataset"] = sw.seconds();
  write_dataset(ds, out.dataset());
  r.artifacts["dataset"] = out.dataset();
  r.artifacts["dataset_meta"] = dataset_meta_path(out.dataset());
  r.results["n_records"] = static_cast<double>(ds.records.size());
  r.results["n_failed"] = static_cast<double>(ds.meta.n_failed);
  r.results["max_residual"] = ds.meta.max_residual;
  r.results["max_terminal_residual"] = ds.meta.max_terminal_residual;

  if (cfg.dataset.holdout_trajectories > 0) {
    Stopwatch hw;
    o.n_trajectories = cfg.dataset.holdout_trajectories;
    o.seed = derive_seed(cfg.seed, kHoldoutStream);
    const Dataset holdout = generate_uniform(*ocp, o);
    r.seconds["holdout"] = hw.seconds();
    write_dataset(holdout, out.holdout());
    r.artifacts["holdout"] = out.holdout();
    r.artifacts["holdout_meta"] = dataset_meta_path(out.holdout());
  }
  write_manifest(cfg, "gen-data", r);
  return r;
}

CommandResult cmd_train(const ExperimentConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const RunLayout out{cfg.out_dir};
  const OcpPtr ocp = cfg.make_ocp();
  CommandResult r;
  const std::string& stage = options.stage;

  auto sl_inputs = [&](Dataset& data, std::optional<Dataset>& holdout, SlConfig& sl) {
    data = load_training_data(cfg, out.dataset());
    r.artifacts["dataset"] = out.dataset();
    if (fs::exists(out.holdout())) {
      holdout = read_dataset(out.holdout());
      r.artifacts["holdout"] = out.holdout();
    }
    sl = cfg.sl;
    sl.validation = holdout ? &*holdout : nullptr;
  };

  if (stage == "sl") {
    Dataset data;
    std::optional<Dataset> holdout;
    SlConfig sl;
    sl_inputs(data, holdout, sl);
    Stopwatch sw;
    const TrainResult res = train_sl(*ocp, data, starting_params(cfg, options.init_checkpoint), sl);
    r.seconds["sl"] = sw.seconds();
    save_stage(cfg, "sl", res.params, res.optimizer, r);
    save_logs(cfg, "sl", res.log, r);
    record_sl_results(res.log, r);
  } else if (stage == "do") {
    Stopwatch sw;
    const TrainResult res = train_do(*ocp, starting_params(cfg, options.init_checkpoint), cfg.direct, ocp->init_box(), "do");
    r.seconds["do"] = sw.seconds();
    save_stage(cfg, "do", res.params, res.optimizer, r);
    save_logs(cfg, "do", res.log, r);
    if (!res.log.steps.empty()) r.results["final_loss"] = res.log.steps.back().loss;
  } else if (stage == "finetune") {
    if (options.run_pretrain) {
      Dataset data;
      std::optional<Dataset> holdout;
      SlConfig sl;
      sl_inputs(data, holdout, sl);
      Stopwatch sw;
      double sl_seconds = 0.0;
      const FinetuneResult res = pretrain_finetune(
          *ocp, data, starting_params(cfg, options.init_checkpoint), sl, cfg.finetune, ocp->init_box(),
          [&](const MlpParams& pretrained) {
            sl_seconds = sw.seconds();
            save_stage(cfg, "sl", pretrained, std::nullopt, r);
          });
      r.seconds["sl"] = sl_seconds;
      r.seconds["finetune"] = sw.seconds() - sl_seconds;
      save_stage(cfg, "finetune", res.finetuned, res.optimizer, r);
      save_logs(cfg, "finetune", res.log, r);
      record_sl_results(res.log, r);
    } else {
      require(out.checkpoint("sl"), "pre-trained checkpoint (train --stage sl, or pass --run-pretrain)");
      const MlpArch a = cfg.arch();
      const Checkpoint pre = load_checkpoint(out.checkpoint("sl"), cfg.problem, a.state_dim, a.control_dim);
      r.artifacts["sl_checkpoint"] = out.checkpoint("sl");
      Stopwatch sw;
      const TrainResult res = train_do(*ocp, pre.params, cfg.finetune, ocp->init_box(), "finetune");
      r.seconds["finetune"] = sw.seconds();
      save_stage(cfg, "finetune", res.params, res.optimizer, r);
      save_logs(cfg, "finetune", res.log, r);
    }
  } else {
    throw ConfigError("stage must be sl, do or finetune, not '" + stage + "'");
  }
  write_manifest(cfg, "train-" + stage, r);
  return r;
}

ValidationSet validation_set_for(const ExperimentConfig& cfg, double* build_seconds) {
  const std::string path = RunLayout{cfg.out_dir}.validation(cfg.init_box);
  if (build_seconds) *build_seconds = 0.0;
  if (fs::exists(path)) {
    ValidationSet cached = read_validation_set(path);
    if (cached.problem == cfg.problem && cached.horizon == cfg.horizon && cached.seed == cfg.eval.validation_seed &&
        cached.states.size() == cfg.eval.validation_count) {
      return cached;
    }
  }
  Stopwatch sw;
  const OcpPtr ocp = cfg.make_ocp();
  ValidationBuildOptions vo;
  vo.count = cfg.eval.validation_count;
  vo.seed = cfg.eval.validation_seed;
  vo.shooting = cfg.bvp.shooting;
  vo.integ = cfg.bvp.integ;
  vo.schedule = cfg.bvp.schedule;
  vo.workers = cfg.workers;
  ValidationSet set = build_validation_set(*ocp, vo);
  write_validation_set(set, path);
  if (build_seconds) *build_seconds = sw.seconds();
  return set;
}

CommandResult cmd_eval(const ExperimentConfig& cfg, const EvalCommandOptions& options) {
  cfg.validate();
  const RunLayout out{cfg.out_dir};
  const OcpPtr ocp = cfg.make_ocp();
  CommandResult r;
  require(options.checkpoint, "checkpoint");
  const MlpArch a = cfg.arch();
  const Checkpoint ck = load_checkpoint(options.checkpoint, cfg.problem, a.state_dim, a.control_dim);
  const std::vector<double> levels = options.noise_levels.empty() ? cfg.eval.noise_levels : options.noise_levels;
  for (double s : levels) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("noise levels must be finite and >= 0");
  }
  r.artifacts["checkpoint"] = options.checkpoint;

  double build = 0.0;
  const ValidationSet vs = validation_set_for(cfg, &build);
  r.seconds["validation_set"] = build;
  r.artifacts["validation_set"] = out.validation(cfg.init_box);
  const std::string tag = ck.meta.stage.empty() ? "model" : ck.meta.stage;
  const json config = json::parse(config_json(cfg));

  Stopwatch sw;
  for (double sigma : levels) {
    EvalOptions eo;
    eo.integ = cfg.rollout;
    eo.workers = cfg.workers;
    eo.noise = NoiseSpec{sigma, cfg.eval.hold_dt, derive_seed(cfg.seed, kNoiseStream)};
    const CostRatioStats st = evaluate_cost_ratio(*ocp, ck.params, vs, eo);
    json doc;
    doc["problem"] = cfg.problem;
    doc["horizon"] = cfg.horizon;
    doc["checkpoint_stage"] = tag;
    doc["sigma"] = sigma;
    doc["hold_dt"] = cfg.eval.hold_dt;
    doc["noise_seed"] = eo.noise->seed;
    doc["validation_count"] = vs.states.size();
    doc["validation_seed"] = vs.seed;
    doc["mean"] = finite_or_null(st.mean);
    doc["std"] = finite_or_null(st.std);
    doc["max"] = finite_or_null(st.max);
    doc["min"] = finite_or_null(st.min);
    doc["median"] = finite_or_null(st.median);
    doc["n_diverged"] = st.n_diverged;
    doc["diverged"] = st.diverged;
    doc["ratios"] = st.ratios;
    doc["config"] = config;
    write_file_atomic(out.stats(tag, sigma), doc.dump(2) + "\n");
    write_file_atomic(out.cdf(tag, sigma), cdf_table(st));
    const std::string key = "sigma" + sigma_tag(sigma);
    r.artifacts["stats_" + key] = out.stats(tag, sigma);
    r.artifacts["cdf_" + key] = out.cdf(tag, sigma);
    r.results["mean_" + key] = st.mean;
    r.results["median_" + key] = st.median;
    r.results["n_diverged_" + key] = static_cast<double>(st.n_diverged);
  }
  r.seconds["eval"] = sw.seconds();
  write_manifest(cfg, "eval-" + tag, r);
  return r;
}

LandscapeReport quadratic_self_test(const std::vector<double>& scales, std::uint64_t seed) {
  InitBox box{Vec::Constant(16, -1.0), Vec::Constant(16, 1.0)};
  const Vec theta = sample_initial_states(box, 1, seed).front();
  const LossAndGrad quadratic = [](const Vec& th) { return LossGrad{0.5 * th.squaredNorm(), th}; };
  const LandscapeReport rep = landscape_probe(quadratic, theta, 1.0, scales);
  if (!(std::abs(rep.effective_beta - 1.0) <= 1e-10)) {
    throw Error("quadratic self-test: effective beta " + format_double(rep.effective_beta) + " differs from 1");
  }
  return rep;
}

CommandResult cmd_landscape(const ExperimentConfig& cfg, const LandscapeOptions& options) {
  cfg.validate();
  const RunLayout out{cfg.out_dir};
  CommandResult r;
  const bool sl = options.loss == "sl";
  if (!sl && options.loss != "do") throw ConfigError("landscape loss must be sl or do, not '" + options.loss + "'");
  const LandscapeSettings& ls = cfg.landscape;
  const std::vector<double> scales = sl ? log_scales(ls.sl_scale_lo, ls.sl_scale_hi, ls.points)
                                        : log_scales(ls.do_scale_lo, ls.do_scale_hi, ls.points);
  Stopwatch sw;
  if (options.quadratic_self_test) {
    const LandscapeReport rep = quadratic_self_test(scales, derive_seed(cfg.seed, kLandscapeStream));
    write_file_atomic(out.landscape("quadratic"), landscape_csv(rep));
    r.artifacts["landscape"] = out.landscape("quadratic");
    r.results["effective_beta"] = rep.effective_beta;
    r.seconds["landscape"] = sw.seconds();
    write_manifest(cfg, "landscape-quadratic", r);
    return r;
  }

  const OcpPtr ocp = cfg.make_ocp();
  const MlpParams base = starting_params(cfg, options.checkpoint);
  if (options.checkpoint) r.artifacts["checkpoint"] = *options.checkpoint;
  auto at = [&base](const Vec& theta) {
    MlpParams p(base.arch);
    p.theta = theta;
    return p;
  };
  LandscapeReport rep;
  if (sl) {
    const Dataset data = load_training_data(cfg, out.dataset());
    r.artifacts["dataset"] = out.dataset();
    std::vector<std::size_t> idx = shuffled_indices(data.records.size(), derive_seed(cfg.seed, kLandscapeStream));
    idx.resize(std::min(idx.size(), ls.sl_batch));
    const LossAndGrad f = [&](const Vec& theta) { return sl_loss(at(theta), data.records, idx); };
    rep = landscape_probe(f, base.theta, cfg.sl.lr, scales);
  } else {
    const std::vector<Vec> x0 =
        sample_initial_states(ocp->init_box(), ls.do_batch, derive_seed(cfg.seed, kLandscapeStream + 1));
    const LossAndGrad f = [&](const Vec& theta) {
      const DoEval ev = do_loss_and_grad_bp(*ocp, at(theta), x0, cfg.rollout, cfg.direct.checkpoint_segments);
      return LossGrad{ev.mean_cost, ev.grad};
    };
    rep = landscape_probe(f, base.theta, cfg.direct.lr, scales);
  }
  r.seconds["landscape"] = sw.seconds();
  write_file_atomic(out.landscape(options.loss), landscape_csv(rep));
  r.artifacts["landscape"] = out.landscape(options.loss);
  r.results["effective_beta"] = rep.effective_beta;
  r.results["relative_envelope"] = rep.relative_envelope();
  r.results["base_loss"] = rep.base_loss;
  write_manifest(cfg, "landscape-" + options.loss, r);
  return r;
}

CommandResult cmd_bvp_solve(const ExperimentConfig& cfg, const BvpSolveOptions& options) {
  cfg.validate();
  const RunLayout out{cfg.out_dir};
  const OcpPtr ocp = cfg.make_ocp();
  CommandResult r;
  Vec x0;
  if (options.x0) {
    if (static_cast<int>(options.x0->size()) != ocp->state_dim()) {
      throw ConfigError("x0 needs " + std::to_string(ocp->state_dim()) + " values for " + cfg.problem);
    }
    x0 = Eigen::Map<const Vec>(options.x0->data(), ocp->state_dim());
  } else {
    x0 = sample_initial_states(ocp->init_box(), options.sample_index + 1, cfg.seed)[options.sample_index];
  }
  Stopwatch sw;
  const ContinuationSchedule sched = cfg.bvp.schedule.value_or(ContinuationSchedule::default_for(*ocp));
  const OpenLoopSolution sol = solve_with_continuation(*ocp, x0, sched, cfg.bvp.shooting, cfg.bvp.integ);
  r.seconds["bvp"] = sw.seconds();

  const int n = ocp->state_dim(), m = ocp->control_dim();
  std::ostringstream os;
  os << "# ocnet-bvp v1 problem=" << cfg.problem << " horizon=" << format_double(cfg.horizon)
     << " converged=" << (sol.converged ? 1 : 0) << " total_cost=" << format_double(sol.total_cost)
     << " residual=" << format_double(sol.residual) << " terminal_residual=" << format_double(sol.terminal_residual)
     << '\n';
  os << 't';
  for (int i = 1; i <= n; ++i) os << ",x" << i;
  for (int i = 1; i <= n; ++i) os << ",lambda" << i;
  for (int i = 1; i <= m; ++i) os << ",u" << i;
  os << '\n';
  for (std::size_t k = 0; k < sol.grid.nodes.size(); ++k) {
    os << format_double(sol.grid.nodes[k]);
    for (int i = 0; i < n; ++i) os << ',' << format_double(sol.states[k][i]);
    for (int i = 0; i < n; ++i) os << ',' << format_double(sol.costates[k][i]);
    for (int i = 0; i < m; ++i) os << ',' << format_double(sol.controls[k][i]);
    os << '\n';
  }
  const std::string path = cfg.out_dir + "/bvp_solution.csv";
  write_file_atomic(path, os.str());
  r.artifacts["trajectory"] = path;
  r.results["total_cost"] = sol.total_cost;
  r.results["residual"] = sol.residual;
  r.results["terminal_residual"] = sol.terminal_residual;
  r.results["newton_iters"] = sol.newton_iters;
  r.results["converged"] = sol.converged ? 1.0 : 0.0;
  write_manifest(cfg, "bvp-solve", r);
  return r;
}

}  // namespace ocnet
