#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stylediff/error.hpp"
#include "stylediff/harness.hpp"

namespace {

using namespace stylediff;

// Flags shared by every subcommand.
struct CliState {
  RunOptions opt;
  std::string scenario_kind = "straight";
  std::string style = "normal";
  std::string variant = "full";
  std::string guidance = "on";
  std::string grid;
  std::vector<double> alpha_values;
  std::vector<double> beta_values;
};

void add_common_flags(CLI::App* cmd, CliState& st) {
  cmd->add_option("--scenario-kind", st.scenario_kind,
                  "generated scenario kind: straight|curve|intersection|merge");
  cmd->add_option("--scenario-file", st.opt.scenario_file,
                  "scenario JSON file (overrides --scenario-kind)");
  cmd->add_option("--style", st.style, "aggressive|normal|conservative");
  cmd->add_option("--checkpoint", st.opt.checkpoint,
                  "checkpoint path (output for train, input otherwise)");
  cmd->add_option("--seed", st.opt.seed, "global seed");
  cmd->add_option("--out-dir", st.opt.out_dir, "artifact directory");
  cmd->add_option("--variant", st.variant,
                  "full|fixed_attention|fixed_guidance|full_ablation");
  cmd->add_option("--alpha-max", st.alpha_values,
                  "collision-weight cap (one value; sweep accepts a list)");
  cmd->add_option("--beta-max", st.beta_values,
                  "speed-weight cap (one value; sweep accepts a list)");
  cmd->add_option("--grid", st.grid, "sweep grid as NxM, e.g. 5x5");
  cmd->add_option("--guidance", st.guidance, "on|off");
}

void finish_options(CliState& st, bool sweep_lists) {
  st.opt.scenario_kind = scenario_kind_from_string(st.scenario_kind);
  st.opt.style = style_from_string(st.style);
  st.opt.variant = variant_from_string(st.variant);
  if (st.guidance == "on") {
    st.opt.use_guidance = true;
  } else if (st.guidance == "off") {
    st.opt.use_guidance = false;
  } else {
    throw ConfigError("--guidance must be on or off");
  }
  if (!st.grid.empty()) {
    int n = 0, m = 0;
    if (std::sscanf(st.grid.c_str(), "%dx%d", &n, &m) != 2)
      throw ConfigError("--grid must look like 5x5");
    st.opt.grid_shape = {n, m};
  }
  if (sweep_lists) {
    st.opt.alpha_grid = st.alpha_values;
    st.opt.beta_grid = st.beta_values;
  } else {
    if (st.alpha_values.size() > 1 || st.beta_values.size() > 1)
      throw ConfigError("this command takes at most one --alpha-max/--beta-max");
    if (!st.alpha_values.empty())
      st.opt.alpha_max_override = st.alpha_values.front();
    if (!st.beta_values.empty())
      st.opt.beta_max_override = st.beta_values.front();
  }
}

}  // namespace

int main(int argc, char** argv) {
  stylediff::pin_blas_single_thread();

  CLI::App app{"style-conditioned diffusion trajectory planner"};
  app.require_subcommand(1);

  CliState st;
  int horizon = 0;
  int n_max = 0;
  int diffusion_steps = 0;

  CLI::App* train = app.add_subcommand("train", "fit the planner on synthetic experts");
  add_common_flags(train, st);
  train->add_option("--steps", st.opt.train_steps, "optimizer steps");
  train->add_option("--batch", st.opt.batch_size, "batch size");
  train->add_option("--dataset-scenes", st.opt.dataset_scenes,
                    "expert scenes (each paired with all three styles)");
  train->add_option("--resume-from", st.opt.resume_from,
                    "continue from an existing checkpoint");
  train->add_option("--horizon", horizon, "trajectory length in steps");
  train->add_option("--n-max", n_max, "agent slots in the encoder");
  train->add_option("--diffusion-steps", diffusion_steps,
                    "noise-schedule length");

  CLI::App* plan = app.add_subcommand("plan", "one open-loop plan");
  add_common_flags(plan, st);
  CLI::App* rollout = app.add_subcommand("rollout", "closed-loop replanning run");
  add_common_flags(rollout, st);
  CLI::App* ablate = app.add_subcommand("ablate", "compare ablation variants");
  add_common_flags(ablate, st);
  CLI::App* sweep = app.add_subcommand("sweep", "weight-cap grid evaluation");
  add_common_flags(sweep, st);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? stylediff::kExitOk : stylediff::kExitConfig;
  }

  try {
    finish_options(st, sweep->parsed());
    if (train->parsed()) {
      if (horizon > 0) {
        st.opt.planner.encoder.horizon = horizon;
        st.opt.planner.denoiser.horizon = horizon;
      }
      if (n_max > 0) st.opt.planner.encoder.n_max = n_max;
      if (diffusion_steps > 0) st.opt.planner.schedule.steps = diffusion_steps;
      const TrainSummary s = cmd_train(st.opt);
      std::printf("trained %d steps (total %lld): loss %.6f -> %.6f\n",
                  s.steps_run, static_cast<long long>(s.total_steps),
                  s.initial_loss, s.final_loss);
      std::printf("checkpoint: %s\n", s.checkpoint_path.c_str());
    } else if (plan->parsed()) {
      const PlanSummary s = cmd_plan(st.opt);
      std::printf("plan: aggregate %.2f, progress %.2f, mean speed %.2f m/s\n",
                  s.report.aggregate, s.report.progress, s.report.mean_speed);
    } else if (rollout->parsed()) {
      const RolloutSummary s = cmd_rollout(st.opt);
      std::printf("rollout: %zu states%s, aggregate %.2f, progress %.2f\n",
                  s.log.size(), s.truncated ? " (truncated)" : "",
                  s.report.aggregate, s.report.progress);
    } else if (ablate->parsed()) {
      const AblateSummary s = cmd_ablate(st.opt);
      for (const auto& [name, score] : s.mean_aggregate)
        std::printf("%s: mean aggregate %.2f\n", name.c_str(), score);
    } else if (sweep->parsed()) {
      const SweepSummary s = cmd_sweep(st.opt);
      std::printf("sweep: %zu cells written\n", s.cells.size());
    }
  } catch (const stylediff::NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return stylediff::kExitNumerical;
  } catch (const stylediff::IoError& e) {
    std::fprintf(stderr, "i/o failure: %s\n", e.what());
    return stylediff::kExitIo;
  } catch (const stylediff::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return stylediff::kExitConfig;
  } catch (const stylediff::InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return stylediff::kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return stylediff::kExitOk;
}
