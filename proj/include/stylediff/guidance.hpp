#pragma once

#include <string>
#include <vector>

#include "stylediff/scenario.hpp"
#include "stylediff/tensor.hpp"

namespace stylediff {

// ---------------------------------------------------------------------------
// Driving styles

enum class StyleTag { kAggressive, kNormal, kConservative };

const char* to_string(StyleTag s);
StyleTag style_from_string(const std::string& s);
inline constexpr int kNumStyles = 3;

struct StyleProfile {
  StyleTag tag = StyleTag::kNormal;
  double desired_speed_multiplier = 1.0;  // of the lane speed limit
  double alpha0 = 0.7;  // base collision-weight gain
  double beta0 = 0.8;   // base speed-weight gain

  static StyleProfile for_tag(StyleTag tag);
};

// ---------------------------------------------------------------------------
// Configuration

struct GuidanceConfig {
  // Guidance-strength schedule lambda(t) = max(0, base - slope * t / T).
  double lambda_base = 1.5;
  double lambda_slope = 1.2;
  // Collision potential width (m).
  double sigma_d = 2.5;
  // Weight-schedule caps, applied after the time schedules.
  double alpha_max = 1.2;
  double beta_max = 2.5;
  // Collision-weight shaping.
  double epsilon_d = 1e-3;   // distance regularizer (m)
  double sigma_c = 0.1;      // curvature sensitivity (1/m)
  double v_max_rel = 15.0;   // closing-speed normalizer (m/s)
  // Speed-weight shaping.
  double gamma_w = 0.5;      // density boost gain
  double sigma_rho = 2.0;    // density decay scale
  // Stability: L2-norm bound on the per-step guidance gradient in x_t space;
  // <= 0 disables.  Keeps late (high-noise) steps from overshooting when the
  // decoded trajectory estimate is still far from the data manifold, while
  // leaving moderate gradients untouched so the correction stays effective.
  double gradient_clip = 9.0;
  // Static-weight fallback used by the ablation study.
  bool fixed_weights = false;
  double fixed_collision_weight = 0.6;
  double fixed_speed_weight = 0.4;

  void validate() const;  // throws ConfigError
};

// lambda(t) for diffusion step t in [0, T]; linear decay clamped at zero.
double lambda_schedule(int t, int total_steps, const GuidanceConfig& cfg);

// ---------------------------------------------------------------------------
// Energies
//
// Trajectories are K x 2 tensors of ego positions in metric space; point k is
// reached at time (k + 1) * dt.

// Predicted obstacle positions aligned with the trajectory points.
struct ObstacleTrack {
  std::vector<Vec2> positions;  // size K
};

// Sum over points and obstacles of exp(-d^2 / sigma_d^2).
double collision_energy(const Tensor& traj,
                        const std::vector<ObstacleTrack>& obstacles,
                        double sigma_d);
Tensor collision_energy_grad(const Tensor& traj,
                             const std::vector<ObstacleTrack>& obstacles,
                             double sigma_d);

// Sum over segments of ((v_k - v_desired_k) / v_limit)^2, with segment speeds
// v_k = |x_{k+1} - x_k| / dt; the last trajectory point has no segment.
double speed_energy(const Tensor& traj, const std::vector<double>& v_desired,
                    double v_limit, double dt);
Tensor speed_energy_grad(const Tensor& traj,
                         const std::vector<double>& v_desired, double v_limit,
                         double dt);

// ---------------------------------------------------------------------------
// Dynamic weights

// Scene-risk summary for the weight schedules, captured at plan time.
struct SceneRisk {
  std::vector<double> obstacle_distances;  // d_i to each valid agent (m)
  std::vector<double> closing_speeds;      // v_rel,i > 0 means approaching
  double curvature = 0.0;                  // |kappa| of the route ahead (1/m)
  double density = 0.0;                    // from Scenario::density
  double speed_deviation = 0.0;            // |ego speed - desired| (m/s)
  double desired_speed = 1.0;              // m/s, > 0
};

// alpha(t) = alpha0 * (1 + 0.8 t / T); beta(t) = beta0 * (1 - 0.6 t / T).
double collision_weight(int t, int total_steps, const SceneRisk& risk,
                        const GuidanceConfig& cfg, const StyleProfile& style);
double speed_weight(int t, int total_steps, const SceneRisk& risk,
                    const GuidanceConfig& cfg, const StyleProfile& style);

struct FusedWeights {
  double raw_collision = 0.0;   // after cap
  double raw_speed = 0.0;       // after cap
  double norm_collision = 0.5;  // normalized to sum to 1
  double norm_speed = 0.5;
  bool degenerate = false;  // both raw weights ~ 0; fell back to equal split
};

FusedWeights fuse_weights(double w_collision, double w_speed,
                          double eps = 1e-9);

// ---------------------------------------------------------------------------
// Evaluation bundle used inside the sampling loop

struct GuidanceContext {
  std::vector<ObstacleTrack> obstacles;
  std::vector<double> v_desired;  // per segment, size K-1 >= sized K is fine
  double v_limit = 10.0;
  double dt = 0.1;
  SceneRisk risk;
  GuidanceConfig cfg;
  StyleProfile style;

  // Builds obstacle tracks (constant velocity for valid agents), desired
  // speeds and the risk summary for a scene.
  static GuidanceContext build(const Scenario& scene, const StyleProfile& style,
                               const GuidanceConfig& cfg, int horizon,
                               double dt);
};

struct GuidanceEval {
  double e_collision = 0.0;
  double e_speed = 0.0;
  double e_fused = 0.0;
  double w_collision = 0.0;   // capped raw weights
  double w_speed = 0.0;
  double wn_collision = 0.5;  // normalized fusion weights
  double wn_speed = 0.5;
  double lambda = 0.0;
  bool degenerate_weights = false;
  Tensor grad;  // gradient of the fused energy w.r.t. the metric trajectory
};

// Energies, weights and the fused analytic gradient for one diffusion step.
GuidanceEval evaluate_guidance(const Tensor& traj,
                               const GuidanceContext& ctx, int t,
                               int total_steps);

// ---------------------------------------------------------------------------
// Score-space application

// s_tilde = score - lambda * grad.  lambda == 0 (or an all-zero gradient)
// returns `score` bitwise unchanged.
Tensor guided_score(const Tensor& score, const Tensor& grad, double lambda);

// The same correction expressed on the noise prediction:
// eps_tilde = eps_hat + lambda * sqrt(1 - alpha_bar_t) * grad.
Tensor guided_noise(const Tensor& eps_hat, const Tensor& grad, double lambda,
                    double sqrt_one_minus_alpha_bar);

}  // namespace stylediff
