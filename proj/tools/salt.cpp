// Command-line front end: every subcommand loads the config, resolves the
// run directory and calls the matching library entry point.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "salt/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string root;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--root", args.root,
                  "output root directory (default: $SALT_OUT_ROOT, else ./out)");
  cmd->add_option("--set", args.overrides,
                  "config override as dotted.path=value; repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for two-stage distillation pre-training"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string role_name;
  std::string fork_from;

  CLI::App* gen = app.add_subcommand("gen-data", "sample and save the train/held-out corpora");
  add_common(gen, args);

  CLI::App* train = app.add_subcommand("train", "train one role end to end");
  add_common(train, args);
  train->add_option("--role", role_name, "slm | baseline | salt | salt_ds | rkd")->required();
  train->add_option("--fork-from", fork_from,
                    "reuse another role's distillation-phase checkpoint when the "
                    "schedules provably match up to that step");

  CLI::App* score = app.add_subcommand("score", "score the train corpus with the early teacher");
  add_common(score, args);

  CLI::App* select = app.add_subcommand("select", "pick the top-scored subset and save it");
  add_common(select, args);

  CLI::App* eval = app.add_subcommand("eval", "held-out metrics, curves and difficulty buckets");
  add_common(eval, args);

  CLI::App* diagnose = app.add_subcommand("diagnose", "exact risk/variance report on a fresh probe corpus");
  add_common(diagnose, args);

  CLI::App* report = app.add_subcommand("report", "consolidate eval outputs into a comparison table");
  add_common(report, args);

  CLI11_PARSE(app, argc, argv);

  try {
    const salt::ExperimentConfig cfg = salt::load_config(args.config_path, args.overrides);
    const salt::RunPaths paths = salt::run_paths(cfg, args.root);
    if (gen->parsed()) {
      salt::cmd_gen_data(cfg, paths);
      std::printf("wrote %s\n", paths.manifest_json().c_str());
    } else if (train->parsed()) {
      const salt::Role role = salt::role_from_string(role_name);
      const salt::TrainOutcome out = salt::cmd_train(cfg, paths, role, fork_from);
      if (out.aborted) {
        std::fprintf(stderr, "error: training aborted: %s\n", out.abort_reason.c_str());
        return 1;
      }
      std::printf("%s: %zu steps done, final checkpoint %s\n", role_name.c_str(),
                  out.steps_completed,
                  paths.ckpt(role, cfg.plan_for(role).total_steps).c_str());
    } else if (score->parsed()) {
      salt::cmd_score(cfg, paths);
      std::printf("wrote %s\n", paths.scores_csv().c_str());
    } else if (select->parsed()) {
      salt::cmd_select(cfg, paths);
      std::printf("wrote %s\n", paths.selected_corpus().c_str());
    } else if (eval->parsed()) {
      salt::cmd_eval(cfg, paths);
      std::printf("wrote %s\n", paths.eval_dir().c_str());
    } else if (diagnose->parsed()) {
      salt::cmd_diagnose(cfg, paths);
      std::printf("wrote %s\n", paths.report_json().c_str());
    } else if (report->parsed()) {
      salt::cmd_report(cfg, paths);
      std::printf("wrote %s\n", paths.comparison_csv().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
