#include "ocnet/config.hpp"

#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <set>

namespace ocnet {

using nlohmann::json;

namespace {

InitBox box_for(const std::string& problem, const std::string& which) {
  if (problem == "satellite") {
    if (which != "full") throw ConfigError("init_box: the satellite only has the 'full' box (or a custom one)");
    return SatelliteOcp::default_box();
  }
  if (which == "full") return QuadrotorOcp::full_box();
  if (which == "small") return QuadrotorOcp::small_box();
  throw ConfigError("init_box: unknown box '" + which + "'");
}

std::vector<double> default_grid(const std::string& problem, double horizon) {
  if (problem != "quadrotor") return {};
  return {0.0, horizon * 10.0 / 16.0, horizon * 14.0 / 16.0, horizon};
}

// Reads keys out of one JSON object and remembers which were used, so the
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }
  std::string where(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  void get(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
    if (!std::isfinite(out)) throw ConfigError(where(key) + " must be finite");
  }
  void get(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(where(key) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  void get(const std::string& key, int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + " must be an integer");
    out = v.get<int>();
  }
  void get(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
    out = v.get<std::string>();
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be a list of numbers");
    out.clear();
    for (const json& e : v) {
      if (!e.is_number()) throw ConfigError(where(key) + " must be a list of numbers");
      out.push_back(e.get<double>());
    }
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(where(key) + " must be a list of integers");
    out.clear();
    for (const json& e : v) {
      if (!e.is_number_integer()) throw ConfigError(where(key) + " must be a list of integers");
      out.push_back(e.get<int>());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + where(key) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_integrator(Section& s, IntegratorSpec& integ) {
  if (s.has("scheme")) {
    std::string name;
    s.get("scheme", name);
    try {
      integ.scheme = parse_scheme(name);
    } catch (const ConfigError& e) {
      throw ConfigError(s.where("scheme") + ": " + e.what());
    }
  }
  s.get("abs_tol", integ.abs_tol);
  s.get("rel_tol", integ.rel_tol);
  s.get("max_steps", integ.max_steps);
  if (s.has("initial_step")) {
    if (s.raw("initial_step").is_null()) {
      integ.initial_step.reset();
    } else {
      double h = 0.0;
      s.get("initial_step", h);
      integ.initial_step = h;
    }
  }
}

void read_direct(Section& s, DoConfig& c) {
  s.get("iterations", c.iterations);
  s.get("batch_size", c.batch_size);
  s.get("lr", c.lr);
  s.get("checkpoint_segments", c.checkpoint_segments);
  if (s.has("gradient_mode")) {
    std::string mode;
    s.get("gradient_mode", mode);
    if (mode == "bp") c.gradient_mode = GradientMode::BackpropThroughRollout;
    else if (mode == "adjoint") c.gradient_mode = GradientMode::AdjointOde;
    else throw ConfigError(s.where("gradient_mode") + " must be 'bp' or 'adjoint'");
  }
}

json integrator_json(const IntegratorSpec& integ) {
  json j{{"scheme", scheme_name(integ.scheme)},
         {"abs_tol", integ.abs_tol},
         {"rel_tol", integ.rel_tol},
         {"max_steps", integ.max_steps}};
  j["initial_step"] = integ.initial_step ? json(*integ.initial_step) : json(nullptr);
  return j;
}

json direct_json(const DoConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"gradient_mode", c.gradient_mode == GradientMode::AdjointOde ? "adjoint" : "bp"},
          {"checkpoint_segments", c.checkpoint_segments}};
}

}  // namespace

ExperimentConfig preset(const std::string& problem, const std::string& profile, std::optional<std::string> box) {
  if (problem != "satellite" && problem != "quadrotor") throw ConfigError("problem: unknown problem '" + problem + "'");
  if (profile != "paper" && profile != "desk") throw ConfigError("profile must be 'paper' or 'desk'");
  const bool desk = profile == "desk";
  ExperimentConfig c;
  c.profile = profile;
  c.problem = problem;
  c.init_box = box.value_or("full");
  c.out_dir = "run_" + problem;
  c.bvp.integ = bvp_integrator();
  c.rollout = IntegratorSpec{};
  c.direct.seed = c.finetune.seed = c.sl.seed = c.seed;
  c.finetune.iterations = 100;
  c.finetune.batch_size = 2048;
  c.finetune.lr = 1e-4;
  c.direct.lr = 0.01;
  c.eval.validation_count = desk ? 20 : 100;

  if (problem == "satellite") {
    c.horizon = 20.0;
    c.rollout.scheme = Scheme::DormandPrince54;
    c.dataset.n_trajectories = 100;
    c.sl.epochs = 100;
    c.sl.batch_size = 1024;
    c.sl.lr = 0.01;
    c.direct.iterations = 2000;
    c.direct.batch_size = 1024;
    c.eval.noise_levels = {0.0, 0.01, 0.025, 0.05};
    if (desk) {
      // 100 epochs over 5100 records at batch 256 is too few steps to fit the
      // data; smaller batches with a decaying rate reach the same accuracy.
      c.sl.batch_size = 64;
      c.sl.lr = 0.005;
      c.sl.lr_decay = LrDecay{20, 0.5};
      c.direct.iterations = 300;
      c.direct.batch_size = 256;
      c.finetune.iterations = 10;
      c.finetune.batch_size = 512;
      c.landscape.sl_batch = 1024;
      c.landscape.do_batch = 64;
    }
  } else {
    c.horizon = 16.0;
    c.rollout.scheme = Scheme::BogackiShampine23;
    c.eval.noise_levels = {0.0, 0.01, 0.05, 0.1};
    c.direct.iterations = 3000;
    c.direct.batch_size = 2048;
    c.sl.batch_size = 4096;
    if (c.init_box == "small") {
      c.dataset.n_trajectories = 500;
      c.sl.epochs = 1000;
      c.sl.lr = 0.001;
    } else {
      c.dataset.n_trajectories = 1000;
      c.sl.epochs = 2000;
      c.sl.lr = 0.01;
      c.sl.lr_decay = LrDecay{500, 0.5};
    }
    if (desk) {
      c.direct.iterations = 300;
      c.direct.batch_size = 512;
      c.finetune.batch_size = 256;
      c.landscape.do_batch = 64;
      if (c.init_box == "small") {
        // 100 trajectories underfit this box badly, so the count stays at the full 500.
        c.sl.batch_size = 256;
        c.sl.lr_decay = LrDecay{250, 0.5};
      } else {
        c.dataset.n_trajectories = 200;
        c.sl.epochs = 200;
        c.sl.batch_size = 1024;
        c.sl.lr_decay = LrDecay{50, 0.5};
      }
    }
  }
  c.dataset.grid = default_grid(problem, c.horizon);
  return c;
}

OcpPtr ExperimentConfig::make_ocp() const {
  const InitBox box = init_box == "custom" ? custom_box : box_for(problem, init_box);
  OcpPtr base = problem == "satellite" ? satellite_ocp() : quadrotor_ocp(horizon);
  return base->with(horizon, box);
}

MlpArch ExperimentConfig::arch() const {
  MlpArch a;
  a.state_dim = problem == "satellite" ? 6 : 12;
  a.control_dim = problem == "satellite" ? 3 : 4;
  a.hidden = hidden;
  return a;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); };
  if (profile != "paper" && profile != "desk") fail("profile", "must be 'paper' or 'desk'");
  if (!(horizon > 0.0)) fail("horizon", "must be > 0");
  if (workers < 1) fail("workers", "must be >= 1");
  if (out_dir.empty()) fail("out_dir", "must not be empty");
  if (hidden.empty()) fail("network.hidden", "needs at least one layer");
  for (int h : hidden) {
    if (h < 1) fail("network.hidden", "layer widths must be >= 1");
  }
  if (init_box == "custom") {
    const int n = problem == "satellite" ? 6 : 12;
    if (custom_box.lo.size() != n || custom_box.hi.size() != n) fail("init_box", "custom box has the wrong dimension");
    try {
      custom_box.validate();
    } catch (const Error& e) {
      fail("init_box", e.what());
    }
  } else {
    box_for(problem, init_box);
  }
  auto checked = [&](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      fail(key, e.what());
    }
  };
  checked("rollout", [&] { rollout.validate(); });
  checked("bvp", [&] {
    bvp.integ.validate();
    bvp.shooting.validate();
    if (bvp.schedule) bvp.schedule->validate();
  });
  if (dataset.sampling != "uniform" && dataset.sampling != "adaptive") {
    fail("dataset.sampling", "must be 'uniform' or 'adaptive'");
  }
  if (dataset.n_trajectories < 1) fail("dataset.n_trajectories", "must be >= 1");
  if (dataset.nodes_per_trajectory < 2) fail("dataset.nodes_per_trajectory", "must be >= 2");
  if (!(dataset.max_failure_fraction >= 0.0 && dataset.max_failure_fraction <= 1.0)) {
    fail("dataset.max_failure_fraction", "must be in [0, 1]");
  }
  if (dataset.sampling == "adaptive") {
    if (problem == "satellite") fail("dataset.sampling", "adaptive sampling has no checkpoint grid for the satellite");
    checked("dataset.grid", [&] { AdaptiveGrid{dataset.grid}.validate(horizon); });
  }
  checked("sl", [&] { sl.validate(); });
  checked("do", [&] { direct.validate(); });
  checked("finetune", [&] { finetune.validate(); });
  if (eval.validation_count < 1) fail("eval.validation_count", "must be >= 1");
  if (eval.noise_levels.empty()) fail("eval.noise_levels", "needs at least one level");
  for (double s : eval.noise_levels) {
    if (!(s >= 0.0)) fail("eval.noise_levels", "levels must be >= 0");
  }
  checked("eval.hold_dt", [&] { NoiseSpec{0.0, eval.hold_dt, 0}.validate(); });
  if (!(landscape.sl_scale_lo > 0.0 && landscape.sl_scale_lo <= landscape.sl_scale_hi)) {
    fail("landscape.sl_scales", "needs 0 < lo <= hi");
  }
  if (!(landscape.do_scale_lo > 0.0 && landscape.do_scale_lo <= landscape.do_scale_hi)) {
    fail("landscape.do_scales", "needs 0 < lo <= hi");
  }
  if (landscape.points < 1) fail("landscape.points", "must be >= 1");
  if (landscape.sl_batch < 1 || landscape.do_batch < 1) fail("landscape", "batch sizes must be >= 1");
}

ExperimentConfig parse_config(const std::string& json_text, const ConfigOverrides& ov) {
  json doc;
  try {
    doc = json_text.empty() ? json::object() : json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section root(doc, "");
  std::string profile = "desk", problem = "satellite", sampling;
  root.get("profile", profile);
  root.get("problem", problem);
  if (ov.profile) profile = *ov.profile;
  if (ov.problem) problem = *ov.problem;

  std::optional<std::string> box;
  bool custom = false;
  if (root.has("init_box")) {
    const json& b = root.raw("init_box");
    if (b.is_string()) {
      box = b.get<std::string>();
    } else if (b.is_object()) {
      custom = true;
    } else {
      throw ConfigError("init_box must be 'full', 'small' or an object with lo and hi");
    }
  }
  ExperimentConfig c = preset(problem, profile, custom ? std::nullopt : box);
  // the adaptive quadrotor run in the large box uses a lower SL rate
  const bool adaptive_doc = doc.contains("dataset") && doc["dataset"].is_object() && doc["dataset"].contains("sampling") &&
                            doc["dataset"]["sampling"] == "adaptive";
  if (problem == "quadrotor" && c.init_box == "full" && (adaptive_doc || ov.sampling == "adaptive")) {
    c.sl.lr = 0.005;
  }
  if (custom) {
    c.init_box = "custom";
    Section b(root.raw("init_box"), "init_box");
    std::vector<double> lo, hi;
    b.get("lo", lo);
    b.get("hi", hi);
    b.finish();
    c.custom_box.lo = Eigen::Map<const Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    c.custom_box.hi = Eigen::Map<const Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  }
  const bool horizon_given = doc.contains("horizon");
  root.get("horizon", c.horizon);
  if (horizon_given) c.dataset.grid = default_grid(problem, c.horizon);
  root.get("seed", c.seed);
  root.get("workers", c.workers);
  root.get("out_dir", c.out_dir);

  if (root.has("network")) {
    Section s(root.raw("network"), "network");
    s.get("hidden", c.hidden);
    s.finish();
  }
  if (root.has("rollout")) {
    Section s(root.raw("rollout"), "rollout");
    read_integrator(s, c.rollout);
    s.finish();
  }
  if (root.has("bvp")) {
    Section s(root.raw("bvp"), "bvp");
    read_integrator(s, c.bvp.integ);
    s.get("residual_tol", c.bvp.shooting.residual_tol);
    s.get("max_newton_iters", c.bvp.shooting.max_newton_iters);
    s.get("fd_eps", c.bvp.shooting.fd_eps);
    s.get("segment_length", c.bvp.shooting.segment_length);
    std::string marching;
    std::vector<double> stages;
    s.get("marching", marching);
    s.get("stages", stages);
    if (!marching.empty() || !stages.empty()) {
      ContinuationSchedule sched = ContinuationSchedule::default_for(*c.make_ocp());
      if (marching == "time") sched.kind = MarchKind::TimeMarching;
      else if (marching == "space") sched.kind = MarchKind::SpaceMarching;
      else if (!marching.empty()) throw ConfigError("bvp.marching must be 'time' or 'space'");
      if (!stages.empty()) sched.stages = stages;
      c.bvp.schedule = sched;
    }
    s.finish();
  }
  if (root.has("dataset")) {
    Section s(root.raw("dataset"), "dataset");
    s.get("sampling", c.dataset.sampling);
    s.get("n_trajectories", c.dataset.n_trajectories);
    s.get("nodes_per_trajectory", c.dataset.nodes_per_trajectory);
    s.get("max_failure_fraction", c.dataset.max_failure_fraction);
    s.get("holdout_trajectories", c.dataset.holdout_trajectories);
    s.get("grid", c.dataset.grid);
    s.finish();
  }
  if (root.has("sl")) {
    Section s(root.raw("sl"), "sl");
    s.get("epochs", c.sl.epochs);
    s.get("batch_size", c.sl.batch_size);
    s.get("lr", c.sl.lr);
    if (s.has("lr_decay")) {
      const json& d = s.raw("lr_decay");
      if (d.is_null()) {
        c.sl.lr_decay.reset();
      } else {
        Section ds(d, "sl.lr_decay");
        LrDecay decay = c.sl.lr_decay.value_or(LrDecay{});
        ds.get("every_n_epochs", decay.every_n_epochs);
        ds.get("factor", decay.factor);
        ds.finish();
        c.sl.lr_decay = decay;
      }
    }
    s.finish();
  }
  if (root.has("do")) {
    Section s(root.raw("do"), "do");
    read_direct(s, c.direct);
    s.finish();
  }
  if (root.has("finetune")) {
    Section s(root.raw("finetune"), "finetune");
    read_direct(s, c.finetune);
    s.finish();
  }
  if (root.has("eval")) {
    Section s(root.raw("eval"), "eval");
    s.get("validation_count", c.eval.validation_count);
    s.get("validation_seed", c.eval.validation_seed);
    s.get("noise_levels", c.eval.noise_levels);
    s.get("hold_dt", c.eval.hold_dt);
    s.finish();
  }
  if (root.has("landscape")) {
    Section s(root.raw("landscape"), "landscape");
    std::vector<double> sl_scales, do_scales;
    s.get("sl_scales", sl_scales);
    s.get("do_scales", do_scales);
    if (!sl_scales.empty()) {
      if (sl_scales.size() != 2) throw ConfigError("landscape.sl_scales must be [lo, hi]");
      c.landscape.sl_scale_lo = sl_scales[0];
      c.landscape.sl_scale_hi = sl_scales[1];
    }
    if (!do_scales.empty()) {
      if (do_scales.size() != 2) throw ConfigError("landscape.do_scales must be [lo, hi]");
      c.landscape.do_scale_lo = do_scales[0];
      c.landscape.do_scale_hi = do_scales[1];
    }
    s.get("points", c.landscape.points);
    s.get("sl_batch", c.landscape.sl_batch);
    s.get("do_batch", c.landscape.do_batch);
    s.finish();
  }
  root.finish();

  if (ov.sampling) c.dataset.sampling = *ov.sampling;
  if (ov.seed) c.seed = *ov.seed;
  if (ov.workers) c.workers = *ov.workers;
  if (ov.out_dir) c.out_dir = *ov.out_dir;
  c.sl.seed = c.direct.seed = c.finetune.seed = c.seed;
  c.direct.integ = c.finetune.integ = c.rollout;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path, const ConfigOverrides& overrides) {
  return parse_config(read_file(path), overrides);
}

std::string config_json(const ExperimentConfig& c) {
  json j;
  j["profile"] = c.profile;
  j["problem"] = c.problem;
  j["horizon"] = c.horizon;
  if (c.init_box == "custom") {
    j["init_box"] = {{"lo", std::vector<double>(c.custom_box.lo.begin(), c.custom_box.lo.end())},
                     {"hi", std::vector<double>(c.custom_box.hi.begin(), c.custom_box.hi.end())}};
  } else {
    j["init_box"] = c.init_box;
  }
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["out_dir"] = c.out_dir;
  j["network"] = {{"hidden", c.hidden}};
  j["rollout"] = integrator_json(c.rollout);
  json bvp = integrator_json(c.bvp.integ);
  bvp["residual_tol"] = c.bvp.shooting.residual_tol;
  bvp["max_newton_iters"] = c.bvp.shooting.max_newton_iters;
  bvp["fd_eps"] = c.bvp.shooting.fd_eps;
  bvp["segment_length"] = c.bvp.shooting.segment_length;
  const ContinuationSchedule sched = c.bvp.schedule.value_or(ContinuationSchedule::default_for(*c.make_ocp()));
  bvp["marching"] = sched.kind == MarchKind::TimeMarching ? "time" : "space";
  bvp["stages"] = sched.stages;
  j["bvp"] = bvp;
  j["dataset"] = {{"sampling", c.dataset.sampling},
                  {"n_trajectories", c.dataset.n_trajectories},
                  {"nodes_per_trajectory", c.dataset.nodes_per_trajectory},
                  {"max_failure_fraction", c.dataset.max_failure_fraction},
                  {"holdout_trajectories", c.dataset.holdout_trajectories},
                  {"grid", c.dataset.grid}};
  json sl{{"epochs", c.sl.epochs}, {"batch_size", c.sl.batch_size}, {"lr", c.sl.lr}};
  sl["lr_decay"] = c.sl.lr_decay
                       ? json{{"every_n_epochs", c.sl.lr_decay->every_n_epochs}, {"factor", c.sl.lr_decay->factor}}
                       : json(nullptr);
  j["sl"] = sl;
  j["do"] = direct_json(c.direct);
  j["finetune"] = direct_json(c.finetune);
  j["eval"] = {{"validation_count", c.eval.validation_count},
               {"validation_seed", c.eval.validation_seed},
               {"noise_levels", c.eval.noise_levels},
               {"hold_dt", c.eval.hold_dt}};
  j["landscape"] = {{"sl_scales", {c.landscape.sl_scale_lo, c.landscape.sl_scale_hi}},
                    {"do_scales", {c.landscape.do_scale_lo, c.landscape.do_scale_hi}},
                    {"points", c.landscape.points},
                    {"sl_batch", c.landscape.sl_batch},
                    {"do_batch", c.landscape.do_batch}};
  return j.dump(2) + "\n";
}

}  // namespace ocnet
