#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stylediff/checkpoint.hpp"
#include "stylediff/metrics.hpp"

namespace stylediff {

// ---------------------------------------------------------------------------
// Run configuration (filled in by the CLI or directly by tests)

enum class AblationVariant {
  kFull,            // trained distance bias + dynamic guidance weights
  kFixedAttention,  // distance bias zeroed (uniform attention prior)
  kFixedGuidance,   // static fusion weights 0.6 / 0.4
  kFullAblation,    // both degradations at once
};

const char* to_string(AblationVariant v);
AblationVariant variant_from_string(const std::string& s);
inline constexpr int kNumVariants = 4;

struct RunOptions {
  // Scenario source: an explicit file wins over the generator.
  ScenarioKind scenario_kind = ScenarioKind::kStraight;
  std::string scenario_file;
  GeneratorParams generator;

  StyleTag style = StyleTag::kNormal;
  // Checkpoint path: output of `train`, input of every other subcommand.
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  AblationVariant variant = AblationVariant::kFull;
  bool use_guidance = true;
  // Single-value weight-cap overrides for plan/rollout.
  std::optional<double> alpha_max_override;
  std::optional<double> beta_max_override;

  // Sweep grid.  Explicit value lists win; otherwise `grid_shape` (from
  // --grid NxM) lays linear grids over the default spans; otherwise the
  // built-in 5x5 default is used.
  std::vector<double> alpha_grid;
  std::vector<double> beta_grid;
  std::optional<std::pair<int, int>> grid_shape;

  // Training.
  PlannerConfig planner;  // architecture when training from scratch
  int train_steps = 200;
  int batch_size = 32;
  int dataset_scenes = 22;  // expert scenes; items = scenes x 3 styles
  int checkpoint_every = 50;
  std::string resume_from;

  // Evaluation suite sizes (ablate / sweep) and the replan stride.
  int suite_scenes = 12;
  int sweep_suite_scenes = 4;
  int rollout_stride = 5;

  void validate() const;  // throws ConfigError
};

// Default sweep grids: alpha spans [0.8, 1.6] uniformly; beta spans
// [1.5, 3.0] and includes the 2.5 reference cell (no uniform 5-point grid
// over that span contains it, so the upper half is refined).
std::vector<double> default_alpha_grid();
std::vector<double> default_beta_grid();

// ---------------------------------------------------------------------------
// Expert reference and dataset

// Pure-pursuit corridor following at the style's desired speed: accelerates
// toward desired_speed_multiplier * v_limit under a comfort accel bound and
// steers at curvature 2 sin(alpha) / L toward a speed-scaled lookahead point
// on the route.  Returns horizon x 2 ego-frame positions; point k is reached
// at (k + 1) * dt.
Tensor expert_trajectory(const Scenario& scene, StyleTag style, int horizon,
                         double dt);

struct DatasetItem {
  Scenario scene;
  StyleTag style;
  Tensor x0_metric;  // horizon x 2 expert trajectory
};

// Deterministic toy corpus: `scenes` generated scenes alternating
// straight/curve with varying agent counts, each paired with all three
// styles.
std::vector<DatasetItem> build_dataset(int scenes, const GeneratorParams& gp,
                                       std::uint64_t seed, int horizon,
                                       double dt);

// Per-coordinate mean/stddev over every expert point in the set.
NormStats fit_norm_stats(const std::vector<DatasetItem>& items);

// ---------------------------------------------------------------------------
// Closed-loop support

// Rigid transform of a world-frame scene into the ego frame: ego moves to the
// origin heading +x, all geometry follows, perception range is re-evaluated
// from the new ego position, and only the `n_max` nearest agents are kept.
Scenario to_ego_frame(const Scenario& world, int n_max);

struct RolloutState {
  double t = 0.0;  // seconds since rollout start
  Vec2 position;   // world frame
  double heading = 0.0;
  double speed = 0.0;
};

// ---------------------------------------------------------------------------
// Subcommands.  Each writes its artifacts under opt.out_dir and returns a
// summary for programmatic use.  Artifacts are byte-identical across runs
// with identical options; wall-clock metadata lives only in run_meta.json.

struct TrainSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps_run = 0;
  std::int64_t total_steps = 0;  // including a resumed prefix
  std::string checkpoint_path;
};

TrainSummary cmd_train(const RunOptions& opt);

struct PlanSummary {
  Tensor trajectory;  // horizon x 2, metric, ego frame
  std::vector<TelemetryRow> telemetry;
  MetricReport report;
  Scenario scene;
};

PlanSummary cmd_plan(const RunOptions& opt);

struct RolloutSummary {
  std::vector<RolloutState> log;  // horizon/dt + 1 states when not truncated
  bool truncated = false;
  std::string failure;  // message when truncated
  MetricReport report;  // over the executed prefix
};

RolloutSummary cmd_rollout(const RunOptions& opt);

struct AblateSummary {
  // Variant name -> suite-mean aggregate score.
  std::map<std::string, double> mean_aggregate;
  // Variant name -> mean max-jerk over the curved high-density subset.
  std::map<std::string, double> curved_dense_max_jerk;
};

AblateSummary cmd_ablate(const RunOptions& opt);

struct SweepCell {
  double alpha_max = 0.0;
  double beta_max = 0.0;
  double mean_aggregate = 0.0;
};

struct SweepSummary {
  std::vector<SweepCell> cells;  // row order of the CSV
};

SweepSummary cmd_sweep(const RunOptions& opt);

// ---------------------------------------------------------------------------
// Shared artifact helpers (used by the subcommands and their tests)

std::string trajectory_to_json(const Tensor& traj, double dt, StyleTag style,
                               std::uint64_t seed);
void write_text_file(const std::string& path, const std::string& content);
std::string telemetry_csv(const std::vector<TelemetryRow>& rows);
// Timestamp sidecar; the only artifact allowed to differ between reruns.
void write_run_meta(const std::string& out_dir, const std::string& command,
                    const std::string& note = "");

}  // namespace stylediff
