// dbp: data generation, training, evaluation and ablation for the dual-branch planner.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dbp/harness.hpp"

using namespace dbp;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c, const std::string& fallback) { return c.out.empty() ? fs::path(fallback) : fs::path(c.out); }

void print_rows(const std::vector<ResultRow>& rows) {
  for (const auto& r : rows) {
    std::printf("%-8s %-10s %-6s %-3s n=%-4zu L2 %.3f %.3f %.3f avg %.3f  CR %.3f %.3f %.3f avg %.3f\n",
                r.experiment.c_str(), r.flags.c_str(), r.perturbation.c_str(), r.split.c_str(), r.metrics.count,
                r.metrics.l2_at[0], r.metrics.l2_at[1], r.metrics.l2_at[2], r.metrics.l2_avg, r.metrics.collision_at[0],
                r.metrics.collision_at[1], r.metrics.collision_at[2], r.metrics.collision_avg);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch planner experiments"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "TOML-style run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Override the run seed");
  app.add_option("--out", common.out, "Output directory");

  std::string data, checkpoint, dataset;
  bool split = false, scene_only = false;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val scenario files and a manifest");
  auto* train = app.add_subcommand("train", "Train the configured variant");
  train->add_option("--data", data, "Dataset directory (default io.data_dir)");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* perturb = app.add_subcommand("perturb", "Evaluate a checkpoint under ego-velocity perturbations");
  for (auto* sub : {eval, perturb}) {
    sub->add_option("--checkpoint", checkpoint, "DBP1 checkpoint")->required();
    sub->add_option("--dataset", dataset, "Scenario file (default <io.data_dir>/val.jsonl)");
    sub->add_flag("--split-by-command", split, "Also report ST and LR rows");
  }
  perturb->add_flag("--scene-only", scene_only, "Feed zeros for the ego branch into fusion");
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the five-rung component ladder");
  ablate->add_option("--data", data, "Dataset directory (default io.data_dir)");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  for (auto* sub : {gen, train, eval, perturb, ablate, gradcheck, show}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve(common);
    const fs::path data_dir = data.empty() ? fs::path(cfg.io.data_dir) : fs::path(data);
    const fs::path ds = dataset.empty() ? fs::path(cfg.io.data_dir) / "val.jsonl" : fs::path(dataset);
    const bool by_command = split || cfg.experiment.split_by_command;

    if (*gen) {
      const fs::path dir = out_dir(common, cfg.io.data_dir);
      const DataManifest m = cmd_gen_data(cfg, dir);
      std::printf("train: %zu scenarios (%zu ST, %zu LR), val: %zu scenarios -> %s\n", m.train.count, m.train.straight,
                  m.train.turn, m.val.count, dir.string().c_str());
    } else if (*train) {
      const fs::path dir = out_dir(common, cfg.io.out_dir);
      const TrainOutcome t = cmd_train(cfg, data_dir, dir);
      const auto& last = t.summary.epochs.back();
      std::printf("%zu epochs, %zu steps, %.1f s; final total loss %.4f", t.summary.epochs.size(), t.summary.steps,
                  t.seconds, last.total);
      if (t.summary.best_epoch) std::printf(", best val L2 %.4f at epoch %zu", t.summary.best_val_l2, t.summary.best_epoch);
      std::printf("\ncheckpoints and losses.csv in %s\n", dir.string().c_str());
    } else if (*eval) {
      print_rows(cmd_eval(cfg, checkpoint, ds, by_command, out_dir(common, cfg.io.out_dir)));
    } else if (*perturb) {
      ForwardOptions opt;
      opt.sever_ego_branch = scene_only;
      print_rows(cmd_perturb(cfg, checkpoint, ds, by_command, out_dir(common, cfg.io.out_dir), opt));
    } else if (*ablate) {
      print_rows(cmd_ablate(cfg, data_dir, out_dir(common, cfg.io.out_dir)));
    } else if (*gradcheck) {
      return cmd_gradcheck(cfg, std::cout).all_passed() ? 0 : 1;
    } else if (*show) {
      std::cout << format_config(cfg);
    }
  } catch (const NonFiniteLoss& e) {
    std::fprintf(stderr, "dbp: training aborted: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dbp: %s\n", e.what());
    return 1;
  }
  return 0;
}
