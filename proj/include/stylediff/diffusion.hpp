#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stylediff/encoder.hpp"
#include "stylediff/guidance.hpp"

namespace stylediff {

// ---------------------------------------------------------------------------
// Variance schedule

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  void validate() const;  // throws ConfigError
};

// Linear beta schedule.  Arrays are indexed by diffusion step t in [1, steps];
// index 0 holds the alpha_bar_0 = 1 convention used by the posterior variance
// (so sigma2[1] == 0 and the final reverse step is deterministic).
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma2;  // (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t

  static NoiseSchedule build(const ScheduleConfig& cfg);

  double sqrt_alpha_bar(int t) const;
  double sqrt_one_minus_alpha_bar(int t) const;
  void check_step(int t) const;  // throws InputError if t outside [1, steps]
  // Whether the terminal signal level sqrt(alpha_bar_T) has decayed below
  // 0.05, i.e. x_T is noise-dominated.  Production schedules must satisfy
  // this; tiny test schedules may not.
  bool terminal_noise_dominated() const;
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps,
                     const NoiseSchedule& ns);

// One reverse update from x_t to x_{t-1} given the noise prediction:
//   mean = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mean + sqrt(sigma2_t) * noise.
Tensor denoise_step(const Tensor& x_t, int t, const Tensor& eps_hat,
                    const Tensor& noise, const NoiseSchedule& ns);

// Plain mean-squared noise-prediction error (the training objective for one
// sample).
double noise_prediction_loss(const Tensor& eps_hat, const Tensor& eps);

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  int width = 64;         // trajectory token width
  int hidden = 128;       // channel MLP width
  int blocks = 4;         // mixer blocks
  int token_hidden = 64;  // time-mixing MLP width
  int horizon = 50;       // trajectory length (must match the encoder)

  void validate() const;
};

// Conditional noise predictor over a horizon x 2 trajectory.  Mixer-style:
// alternating channel MLPs and time-mixing MLPs, each modulated by a
// scale/shift computed from (diffusion step embedding + pooled conditioning
// tokens).  The pooled conditioning attends over the full token grid,
// including padding rows, which carry scene context by construction.
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, int cond_dim);

  const DenoiserConfig& config() const { return cfg_; }
  int cond_dim() const { return cond_dim_; }

  void init_params(ParamStore& store, Rng& rng) const;

  Var forward_on_tape(Tape& tape, const ParamStore& store, Var x_t, int t,
                      int total_steps, Var z) const;
  Tensor forward(const ParamStore& store, const Tensor& x_t, int t,
                 int total_steps, const Tensor& z) const;

 private:
  DenoiserConfig cfg_;
  int cond_dim_;
};

// ---------------------------------------------------------------------------
// Planner bundle

// Per-coordinate normalization between metric trajectories and the unit-scale
// space the diffusion model operates in.
struct NormStats {
  double mean_x = 0.0;
  double mean_y = 0.0;
  double std_x = 1.0;
  double std_y = 1.0;

  void validate() const;
};

Tensor normalize_traj(const Tensor& metric, const NormStats& ns);
Tensor denormalize_traj(const Tensor& unit, const NormStats& ns);

struct PlannerConfig {
  EncoderConfig encoder;
  DenoiserConfig denoiser;
  ScheduleConfig schedule;
  GuidanceConfig guidance;  // defaults; per-call overrides are possible
  double dt = 0.1;          // seconds between trajectory points

  void validate() const;
};

struct SampleRequest {
  StyleTag style = StyleTag::kNormal;
  int num_samples = 1;
  std::uint64_t seed = 0;
  bool use_guidance = true;
  std::optional<GuidanceConfig> guidance_override;
  bool zero_distance_bias = false;  // encoder ablation at inference time
};

// One telemetry row per guided denoising step.
struct TelemetryRow {
  int t = 0;
  double lambda = 0.0;
  double w_collision = 0.0;
  double w_speed = 0.0;
  double e_collision = 0.0;
  double e_speed = 0.0;
};

struct SampleResult {
  std::vector<Tensor> trajectories;  // metric space, horizon x 2 each
  std::vector<std::vector<TelemetryRow>> telemetry;  // aligned with samples
};

class Planner {
 public:
  explicit Planner(PlannerConfig cfg);

  const PlannerConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const StyleEncoder& encoder() const { return encoder_; }
  const Denoiser& denoiser() const { return denoiser_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  NormStats& norm_stats() { return norm_; }
  const NormStats& norm_stats() const { return norm_; }

  void init_params(std::uint64_t seed);

  StyleFeatures encode_scene(const Scenario& scene, StyleTag style,
                             bool zero_distance_bias = false) const;

  // Reverse-diffusion sampling with optional energy guidance.  Deterministic
  // for a fixed (scene, request) pair.
  SampleResult sample(const Scenario& scene, const SampleRequest& req) const;

 private:
  PlannerConfig cfg_;
  StyleEncoder encoder_;
  Denoiser denoiser_;
  NoiseSchedule sched_;
  ParamStore params_;
  NormStats norm_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainItem {
  const Scenario* scene = nullptr;
  StyleTag style = StyleTag::kNormal;
  Tensor x0_norm;  // normalized expert trajectory, horizon x 2
};

struct BatchResult {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;
};

// Noise-prediction loss and parameter gradients for one batch.  Items sharing
// a (scene, style) condition reuse one encoder pass; the conditioning
// gradient is accumulated across their denoiser passes and then pushed
// through the encoder.
BatchResult training_loss(const Planner& planner,
                          const std::vector<TrainItem>& batch, Rng& rng);

// Merge helper: dst[name] += src[name] for every entry of src.
void accumulate_grads(std::map<std::string, Tensor>& dst,
                      const std::map<std::string, Tensor>& src);

}  // namespace stylediff
