#include "stylediff/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "stylediff/error.hpp"

namespace stylediff {

const char* to_string(StyleTag s) {
  switch (s) {
    case StyleTag::kAggressive: return "aggressive";
    case StyleTag::kNormal: return "normal";
    case StyleTag::kConservative: return "conservative";
  }
  return "normal";
}

StyleTag style_from_string(const std::string& s) {
  if (s == "aggressive") return StyleTag::kAggressive;
  if (s == "normal") return StyleTag::kNormal;
  if (s == "conservative") return StyleTag::kConservative;
  throw InputError("unknown style: " + s);
}

StyleProfile StyleProfile::for_tag(StyleTag tag) {
  switch (tag) {
    case StyleTag::kAggressive: return {tag, 1.1, 0.5, 1.2};
    case StyleTag::kNormal: return {tag, 1.0, 0.7, 0.8};
    case StyleTag::kConservative: return {tag, 0.9, 1.0, 0.5};
  }
  return {StyleTag::kNormal, 1.0, 0.7, 0.8};
}

void GuidanceConfig::validate() const {
  if (!(lambda_base >= 0.0)) throw ConfigError("lambda_base must be >= 0");
  if (!(lambda_slope >= 0.0)) throw ConfigError("lambda_slope must be >= 0");
  if (!(sigma_d > 0.0)) throw ConfigError("sigma_d must be > 0");
  if (!(alpha_max > 0.0)) throw ConfigError("alpha_max must be > 0");
  if (!(beta_max > 0.0)) throw ConfigError("beta_max must be > 0");
  if (!(epsilon_d > 0.0)) throw ConfigError("epsilon_d must be > 0");
  if (!(sigma_c > 0.0)) throw ConfigError("sigma_c must be > 0");
  if (!(v_max_rel > 0.0)) throw ConfigError("v_max_rel must be > 0");
  if (!(gamma_w >= 0.0)) throw ConfigError("gamma_w must be >= 0");
  if (!(sigma_rho > 0.0)) throw ConfigError("sigma_rho must be > 0");
  if (fixed_weights) {
    if (!(fixed_collision_weight >= 0.0) || !(fixed_speed_weight >= 0.0) ||
        fixed_collision_weight + fixed_speed_weight <= 0.0)
      throw ConfigError("fixed weights must be non-negative with positive sum");
  }
}

double lambda_schedule(int t, int total_steps, const GuidanceConfig& cfg) {
  if (total_steps <= 0) throw InputError("lambda_schedule: total_steps must be > 0");
  if (t < 0 || t > total_steps)
    throw InputError("lambda_schedule: t outside [0, total_steps]");
  const double frac = static_cast<double>(t) / total_steps;
  return std::max(0.0, cfg.lambda_base - cfg.lambda_slope * frac);
}

// ---------------------------------------------------------------------------
// Energies

namespace {

void check_traj(const Tensor& traj) {
  if (traj.rank() != 2 || traj.cols() != 2)
    throw InputError("trajectory must be K x 2, got " + traj.shape_str());
  if (!traj.all_finite()) throw NumericalError("trajectory has non-finite values");
}

}  // namespace

double collision_energy(const Tensor& traj,
                        const std::vector<ObstacleTrack>& obstacles,
                        double sigma_d) {
  check_traj(traj);
  if (!(sigma_d > 0.0)) throw ConfigError("sigma_d must be > 0");
  const int k_max = traj.rows();
  for (const auto& o : obstacles)
    if (static_cast<int>(o.positions.size()) != k_max)
      throw InputError("obstacle track length does not match trajectory");
  const double inv_s2 = 1.0 / (sigma_d * sigma_d);
  double e = 0.0;
  for (int k = 0; k < k_max; ++k) {
    const Vec2 x{traj.at(k, 0), traj.at(k, 1)};
    for (const auto& o : obstacles) {
      const Vec2 d = x - o.positions[static_cast<std::size_t>(k)];
      e += std::exp(-d.dot(d) * inv_s2);
    }
  }
  return e;
}

Tensor collision_energy_grad(const Tensor& traj,
                             const std::vector<ObstacleTrack>& obstacles,
                             double sigma_d) {
  check_traj(traj);
  if (!(sigma_d > 0.0)) throw ConfigError("sigma_d must be > 0");
  const int k_max = traj.rows();
  for (const auto& o : obstacles)
    if (static_cast<int>(o.positions.size()) != k_max)
      throw InputError("obstacle track length does not match trajectory");
  const double inv_s2 = 1.0 / (sigma_d * sigma_d);
  Tensor g(k_max, 2);
  for (int k = 0; k < k_max; ++k) {
    const Vec2 x{traj.at(k, 0), traj.at(k, 1)};
    for (const auto& o : obstacles) {
      const Vec2 d = x - o.positions[static_cast<std::size_t>(k)];
      const double w = std::exp(-d.dot(d) * inv_s2) * (-2.0 * inv_s2);
      g.at(k, 0) += w * d.x;
      g.at(k, 1) += w * d.y;
    }
  }
  return g;
}

double speed_energy(const Tensor& traj, const std::vector<double>& v_desired,
                    double v_limit, double dt) {
  check_traj(traj);
  if (!(v_limit > 0.0)) throw ConfigError("v_limit must be > 0");
  if (!(dt > 0.0)) throw ConfigError("dt must be > 0");
  const int segs = traj.rows() - 1;
  if (static_cast<int>(v_desired.size()) < segs)
    throw InputError("v_desired shorter than the segment count");
  double e = 0.0;
  for (int k = 0; k < segs; ++k) {
    const Vec2 d{traj.at(k + 1, 0) - traj.at(k, 0),
                 traj.at(k + 1, 1) - traj.at(k, 1)};
    const double v = d.norm() / dt;
    const double r = (v - v_desired[static_cast<std::size_t>(k)]) / v_limit;
    e += r * r;
  }
  return e;
}

Tensor speed_energy_grad(const Tensor& traj,
                         const std::vector<double>& v_desired, double v_limit,
                         double dt) {
  check_traj(traj);
  if (!(v_limit > 0.0)) throw ConfigError("v_limit must be > 0");
  if (!(dt > 0.0)) throw ConfigError("dt must be > 0");
  const int segs = traj.rows() - 1;
  if (static_cast<int>(v_desired.size()) < segs)
    throw InputError("v_desired shorter than the segment count");
  Tensor g(traj.rows(), 2);
  for (int k = 0; k < segs; ++k) {
    const Vec2 d{traj.at(k + 1, 0) - traj.at(k, 0),
                 traj.at(k + 1, 1) - traj.at(k, 1)};
    const double len = d.norm();
    if (len < 1e-12) continue;  // kink in |.|; treat the subgradient as zero
    const double v = len / dt;
    const double r = (v - v_desired[static_cast<std::size_t>(k)]) / v_limit;
    const double scale = 2.0 * r / (v_limit * dt * len);
    g.at(k + 1, 0) += scale * d.x;
    g.at(k + 1, 1) += scale * d.y;
    g.at(k, 0) -= scale * d.x;
    g.at(k, 1) -= scale * d.y;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dynamic weights

double collision_weight(int t, int total_steps, const SceneRisk& risk,
                        const GuidanceConfig& cfg, const StyleProfile& style) {
  if (total_steps <= 0) throw InputError("collision_weight: total_steps must be > 0");
  if (risk.obstacle_distances.size() != risk.closing_speeds.size())
    throw InputError("risk distance/closing-speed size mismatch");
  const double frac = static_cast<double>(t) / total_steps;
  const double alpha_t = style.alpha0 * (1.0 + 0.8 * frac);
  double hazard = 0.0;
  for (std::size_t i = 0; i < risk.obstacle_distances.size(); ++i) {
    const double d = std::max(0.0, risk.obstacle_distances[i]);
    const double closing = std::max(0.0, risk.closing_speeds[i] / cfg.v_max_rel);
    hazard += closing / (d + cfg.epsilon_d);
  }
  const double raw =
      alpha_t * hazard * std::exp(std::abs(risk.curvature) / cfg.sigma_c);
  return std::min(raw, cfg.alpha_max);
}

double speed_weight(int t, int total_steps, const SceneRisk& risk,
                    const GuidanceConfig& cfg, const StyleProfile& style) {
  if (total_steps <= 0) throw InputError("speed_weight: total_steps must be > 0");
  if (!(risk.desired_speed > 0.0))
    throw InputError("speed_weight: desired_speed must be > 0");
  const double frac = static_cast<double>(t) / total_steps;
  const double beta_t = style.beta0 * (1.0 - 0.6 * frac);
  const double dev = std::min(1.0, risk.speed_deviation / risk.desired_speed);
  const double density_boost =
      1.0 + cfg.gamma_w * std::exp(-risk.density / cfg.sigma_rho);
  const double raw = beta_t * dev * density_boost;
  return std::min(std::max(raw, 0.0), cfg.beta_max);
}

FusedWeights fuse_weights(double w_collision, double w_speed, double eps) {
  if (w_collision < 0.0 || w_speed < 0.0)
    throw InputError("fuse_weights: weights must be non-negative");
  FusedWeights f;
  f.raw_collision = w_collision;
  f.raw_speed = w_speed;
  const double sum = w_collision + w_speed;
  if (sum < eps) {
    f.degenerate = true;
    f.norm_collision = 0.5;
    f.norm_speed = 0.5;
  } else {
    f.norm_collision = w_collision / sum;
    f.norm_speed = w_speed / sum;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Context and evaluation

GuidanceContext GuidanceContext::build(const Scenario& scene,
                                       const StyleProfile& style,
                                       const GuidanceConfig& cfg, int horizon,
                                       double dt) {
  cfg.validate();
  if (horizon < 2) throw InputError("guidance horizon must be >= 2");
  if (!(dt > 0.0)) throw InputError("dt must be > 0");
  GuidanceContext ctx;
  ctx.cfg = cfg;
  ctx.style = style;
  ctx.dt = dt;
  ctx.v_limit = scene.lanes.empty() ? 10.0 : scene.lanes.front().speed_limit;
  const double v_des = style.desired_speed_multiplier * ctx.v_limit;
  ctx.v_desired.assign(static_cast<std::size_t>(horizon), v_des);

  const auto mask = validity_mask(scene);
  const Vec2 ego_v{scene.ego.speed * std::cos(scene.ego.heading),
                   scene.ego.speed * std::sin(scene.ego.heading)};
  for (std::size_t i = 0; i < scene.agents.size(); ++i) {
    if (!mask[i]) continue;
    const AgentState& a = scene.agents[i];
    ObstacleTrack track;
    track.positions.reserve(static_cast<std::size_t>(horizon));
    for (int k = 0; k < horizon; ++k)
      track.positions.push_back(a.position + a.velocity * ((k + 1) * dt));
    ctx.obstacles.push_back(std::move(track));

    const Vec2 rel = a.position - scene.ego.position;
    const double d = rel.norm();
    ctx.risk.obstacle_distances.push_back(d);
    // Closing speed: positive when the gap is shrinking.
    const double closing =
        d > 1e-9 ? -rel.dot(a.velocity - ego_v) / d : a.velocity.norm();
    ctx.risk.closing_speeds.push_back(closing);
  }

  // Route curvature over the next 40 m ahead of the ego.
  double c = 0.0;
  if (scene.route.size() >= 2) {
    const auto cum = geom::cumulative_lengths(scene.route);
    const double s0 = geom::project_s(scene.route, scene.ego.position);
    for (std::size_t k = 0; k < scene.route.size(); ++k)
      if (cum[k] >= s0 && cum[k] <= s0 + 40.0)
        c = std::max(c, std::abs(scene.curvature_profile[k]));
  }
  ctx.risk.curvature = c;
  ctx.risk.density = scene.density;
  ctx.risk.desired_speed = v_des;
  ctx.risk.speed_deviation = std::abs(scene.ego.speed - v_des);
  return ctx;
}

GuidanceEval evaluate_guidance(const Tensor& traj, const GuidanceContext& ctx,
                               int t, int total_steps) {
  GuidanceEval ev;
  ev.lambda = lambda_schedule(t, total_steps, ctx.cfg);
  ev.e_collision = collision_energy(traj, ctx.obstacles, ctx.cfg.sigma_d);
  ev.e_speed = speed_energy(traj, ctx.v_desired, ctx.v_limit, ctx.dt);

  if (ctx.cfg.fixed_weights) {
    const double sum =
        ctx.cfg.fixed_collision_weight + ctx.cfg.fixed_speed_weight;
    ev.w_collision = ctx.cfg.fixed_collision_weight;
    ev.w_speed = ctx.cfg.fixed_speed_weight;
    ev.wn_collision = ctx.cfg.fixed_collision_weight / sum;
    ev.wn_speed = ctx.cfg.fixed_speed_weight / sum;
  } else {
    const double wc = collision_weight(t, total_steps, ctx.risk, ctx.cfg, ctx.style);
    const double ws = speed_weight(t, total_steps, ctx.risk, ctx.cfg, ctx.style);
    const FusedWeights f = fuse_weights(wc, ws);
    ev.w_collision = f.raw_collision;
    ev.w_speed = f.raw_speed;
    ev.wn_collision = f.norm_collision;
    ev.wn_speed = f.norm_speed;
    ev.degenerate_weights = f.degenerate;
  }
  ev.e_fused = ev.wn_collision * ev.e_collision + ev.wn_speed * ev.e_speed;

  Tensor gc = collision_energy_grad(traj, ctx.obstacles, ctx.cfg.sigma_d);
  Tensor gs = speed_energy_grad(traj, ctx.v_desired, ctx.v_limit, ctx.dt);
  gc *= ev.wn_collision;
  gs *= ev.wn_speed;
  ev.grad = gc + gs;
  if (!ev.grad.all_finite())
    throw NumericalError("guidance gradient is non-finite at step " +
                         std::to_string(t));
  return ev;
}

// ---------------------------------------------------------------------------
// Score-space application

Tensor guided_score(const Tensor& score, const Tensor& grad, double lambda) {
  if (!score.same_shape(grad))
    throw InputError("guided_score: shape mismatch");
  if (lambda == 0.0 || grad.max_abs() == 0.0) return score;
  Tensor out = score;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= lambda * grad[i];
  if (!out.all_finite()) throw NumericalError("guided score is non-finite");
  return out;
}

Tensor guided_noise(const Tensor& eps_hat, const Tensor& grad, double lambda,
                    double sqrt_one_minus_alpha_bar) {
  if (!eps_hat.same_shape(grad))
    throw InputError("guided_noise: shape mismatch");
  if (lambda == 0.0 || grad.max_abs() == 0.0) return eps_hat;
  Tensor out = eps_hat;
  const double c = lambda * sqrt_one_minus_alpha_bar;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c * grad[i];
  if (!out.all_finite()) throw NumericalError("guided noise is non-finite");
  return out;
}

}  // namespace stylediff
