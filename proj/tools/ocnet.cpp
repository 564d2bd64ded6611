#include "ocnet/errors.hpp"
#include "ocnet/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  std::optional<std::string> profile;
  std::optional<std::string> problem;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config document")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--workers", c.workers, "parallel solves / rollouts")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--profile", c.profile, "preset: paper or desk")->check(CLI::IsMember({"paper", "desk"}));
  cmd->add_option("--problem", c.problem, "satellite or quadrotor")->check(CLI::IsMember({"satellite", "quadrotor"}));
}

ocnet::ExperimentConfig resolve(const Common& c, std::optional<std::string> sampling = {}) {
  ocnet::ConfigOverrides ov;
  ov.profile = c.profile;
  ov.problem = c.problem;
  ov.sampling = std::move(sampling);
  ov.seed = c.seed;
  ov.workers = c.workers;
  ov.out_dir = c.out;
  return c.config_path.empty() ? ocnet::parse_config("", ov) : ocnet::load_config(c.config_path, ov);
}

void report(const ocnet::CommandResult& r) {
  for (const auto& [role, path] : r.artifacts) std::printf("%-24s %s\n", role.c_str(), path.c_str());
  for (const auto& [key, value] : r.results) std::printf("%-24s %.10g\n", key.c_str(), value);
  std::printf("%-24s %s\n", "manifest", r.manifest_path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural feedback controllers for optimal control: data generation, training, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ocnet::kToolVersion);

  Common gen_c, train_c, eval_c, land_c, bvp_c;

  auto* gen = app.add_subcommand("gen-data", "solve open-loop problems and write the training dataset");
  add_common(gen, gen_c);
  std::optional<std::string> sampling;
  gen->add_option("--sampling", sampling, "uniform or adaptive")->check(CLI::IsMember({"uniform", "adaptive"}));

  auto* train = app.add_subcommand("train", "train a controller");
  add_common(train, train_c);
  ocnet::TrainOptions topt;
  std::optional<std::string> init_ckpt;
  train->add_option("--stage", topt.stage, "sl, do or finetune")->required()->check(CLI::IsMember({"sl", "do", "finetune"}));
  train->add_flag("--run-pretrain", topt.run_pretrain, "finetune: run the SL stage first");
  train->add_option("--init", init_ckpt, "start from this checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "closed-loop cost ratios against the optimal open-loop costs");
  add_common(eval, eval_c);
  ocnet::EvalCommandOptions eopt;
  eval->add_option("--checkpoint", eopt.checkpoint, "trained checkpoint")->required();
  eval->add_option("--noise", eopt.noise_levels, "noise levels, e.g. --noise 0 0.01 0.05")->delimiter(',');

  auto* land = app.add_subcommand("landscape", "probe the loss landscape along the gradient");
  add_common(land, land_c);
  ocnet::LandscapeOptions lopt;
  std::optional<std::string> land_ckpt;
  land->add_option("--loss", lopt.loss, "sl or do")->check(CLI::IsMember({"sl", "do"}));
  land->add_option("--checkpoint", land_ckpt, "probe around this checkpoint instead of a fresh init");
  land->add_flag("--quadratic-self-test", lopt.quadratic_self_test, "probe l = |theta|^2 / 2 and require beta = 1");

  auto* bvp = app.add_subcommand("bvp-solve", "single open-loop solve written to a trajectory file");
  add_common(bvp, bvp_c);
  ocnet::BvpSolveOptions bopt;
  std::vector<double> x0;
  bvp->add_option("--x0", x0, "initial state, comma separated")->delimiter(',');
  bvp->add_option("--index", bopt.sample_index, "index of the state drawn from the init box when --x0 is absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      report(ocnet::cmd_gen_data(resolve(gen_c, sampling)));
    } else if (*train) {
      topt.init_checkpoint = init_ckpt;
      report(ocnet::cmd_train(resolve(train_c), topt));
    } else if (*eval) {
      report(ocnet::cmd_eval(resolve(eval_c), eopt));
    } else if (*land) {
      lopt.checkpoint = land_ckpt;
      report(ocnet::cmd_landscape(resolve(land_c), lopt));
    } else if (*bvp) {
      if (!x0.empty()) bopt.x0 = x0;
      report(ocnet::cmd_bvp_solve(resolve(bvp_c), bopt));
    }
  } catch (const ocnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ocnet::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const ocnet::SchemaMismatch& e) {
    std::cerr << "schema mismatch: " << e.what() << '\n';
    return 4;
  } catch (const ocnet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
