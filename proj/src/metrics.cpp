#include "stylediff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "stylediff/error.hpp"

namespace stylediff {

void MetricThresholds::validate() const {
  if (!(ego_radius > 0.0) || !(agent_radius > 0.0))
    throw ConfigError("collision radii must be > 0");
  if (!(ttc_full > 0.0)) throw ConfigError("ttc_full must be > 0");
  if (!(accel_limit > 0.0) || !(jerk_limit > 0.0))
    throw ConfigError("comfort limits must be > 0");
  const double wsum = w_ttc + w_comfort + w_progress + w_style;
  if (std::abs(wsum - 1.0) > 1e-9)
    throw ConfigError("aggregate weights must sum to 1");
}

EvaluationInput make_open_loop_input(const Scenario& scene, const Tensor& traj,
                                     double dt, double v_desired) {
  EvaluationInput in;
  in.trajectory = traj;
  in.dt = dt;
  in.route = scene.route;
  in.lanes = scene.lanes;
  in.v_desired = v_desired;
  in.initial_position = scene.ego.position;
  in.initial_speed = scene.ego.speed;
  const int k_max = traj.rows();
  in.scenes.reserve(static_cast<std::size_t>(k_max));
  for (int k = 0; k < k_max; ++k)
    in.scenes.push_back(step_agents(scene, (k + 1) * dt));
  return in;
}

namespace {

// Earliest non-negative time at which two discs with combined radius r meet
// under constant relative motion, or +infinity if they never do.
double disc_ttc(Vec2 rel_p, Vec2 rel_v, double r) {
  const double c = rel_p.dot(rel_p) - r * r;
  if (c <= 0.0) return 0.0;  // already overlapping
  const double a = rel_v.dot(rel_v);
  const double b = 2.0 * rel_p.dot(rel_v);
  if (a < 1e-12) return std::numeric_limits<double>::infinity();
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double tau = (-b - std::sqrt(disc)) / (2.0 * a);
  return tau >= 0.0 ? tau : std::numeric_limits<double>::infinity();
}

bool inside_corridor(const std::vector<Lane>& lanes, Vec2 p) {
  for (const Lane& lane : lanes)
    if (geom::lateral_distance(lane.points, p) <= lane.width / 2.0 + 1e-9)
      return true;
  return false;
}

}  // namespace

MetricReport compute_metrics(const EvaluationInput& in,
                             const MetricThresholds& th) {
  th.validate();
  if (in.trajectory.rank() != 2 || in.trajectory.cols() != 2 ||
      in.trajectory.rows() < 2)
    throw InputError("metrics need a K x 2 trajectory with K >= 2");
  if (!in.trajectory.all_finite())
    throw NumericalError("metrics input trajectory is non-finite");
  if (static_cast<int>(in.scenes.size()) != in.trajectory.rows())
    throw InputError("metrics need one scene per trajectory point");
  if (!(in.dt > 0.0)) throw InputError("metrics dt must be > 0");
  if (!(in.v_desired > 0.0)) throw InputError("v_desired must be > 0");
  if (in.route.size() < 2) throw InputError("metrics need a route");

  const int k_max = in.trajectory.rows();
  auto point = [&](int k) -> Vec2 {
    if (k < 0) return in.initial_position;
    return {in.trajectory.at(k, 0), in.trajectory.at(k, 1)};
  };

  MetricReport r;

  // Finite-difference velocities; v[k] is the speed over segment (k-1, k).
  std::vector<Vec2> vel(static_cast<std::size_t>(k_max));
  for (int k = 0; k < k_max; ++k)
    vel[static_cast<std::size_t>(k)] = (point(k) - point(k - 1)) * (1.0 / in.dt);

  // --- collisions and TTC --------------------------------------------------
  const double radius = th.ego_radius + th.agent_radius;
  bool collided = false;
  double min_ttc = std::numeric_limits<double>::infinity();
  for (int k = 0; k < k_max; ++k) {
    const Vec2 x = point(k);
    const Vec2 v = vel[static_cast<std::size_t>(k)];
    for (const AgentState& a : in.scenes[static_cast<std::size_t>(k)].agents) {
      const Vec2 rel = a.position - x;
      if (rel.norm() < radius) collided = true;
      min_ttc = std::min(min_ttc, disc_ttc(rel, a.velocity - v, radius));
    }
  }
  r.nc = collided ? 0.0 : 100.0;
  r.min_ttc = std::min(min_ttc, 999.0);
  r.ttc_score = 100.0 * std::clamp(r.min_ttc / th.ttc_full, 0.0, 1.0);

  // --- drivable area -------------------------------------------------------
  int inside = 0;
  for (int k = 0; k < k_max; ++k)
    if (inside_corridor(in.lanes, point(k))) ++inside;
  r.dac = 100.0 * static_cast<double>(inside) / k_max;

  // --- comfort -------------------------------------------------------------
  // Accelerations need two velocities, jerks need two accelerations; seed the
  // chain with the measured initial speed along the first segment direction.
  std::vector<Vec2> acc;
  {
    Vec2 v_prev;
    const Vec2 first = vel[0];
    const double n = first.norm();
    v_prev = n > 1e-12 ? first * (in.initial_speed / n)
                       : Vec2{in.initial_speed, 0.0};
    for (int k = 0; k < k_max; ++k) {
      acc.push_back((vel[static_cast<std::size_t>(k)] - v_prev) * (1.0 / in.dt));
      v_prev = vel[static_cast<std::size_t>(k)];
    }
  }
  int violations = 0;
  int checks = 0;
  for (std::size_t k = 0; k < acc.size(); ++k) {
    const double a = acc[k].norm();
    r.max_accel = std::max(r.max_accel, a);
    double j = 0.0;
    if (k > 0) {
      j = (acc[k] - acc[k - 1]).norm() / in.dt;
      r.max_jerk = std::max(r.max_jerk, j);
    }
    ++checks;
    if (a > th.accel_limit || j > th.jerk_limit) ++violations;
  }
  r.comfort = 100.0 * (1.0 - static_cast<double>(violations) / checks);

  // --- progress ------------------------------------------------------------
  const double route_len = geom::total_length(in.route);
  const double s0 = geom::project_s(in.route, in.initial_position);
  const double s1 = geom::project_s(in.route, point(k_max - 1));
  const double achieved = std::max(0.0, s1 - s0);
  const double reference =
      std::min(route_len - s0, in.v_desired * k_max * in.dt);
  r.progress = reference > 1e-9
                   ? 100.0 * std::clamp(achieved / reference, 0.0, 1.0)
                   : 100.0;

  // --- style alignment -----------------------------------------------------
  double speed_sum = 0.0;
  for (const Vec2& v : vel) speed_sum += v.norm();
  r.mean_speed = speed_sum / k_max;
  r.style_alignment =
      100.0 * std::exp(-std::abs(r.mean_speed - in.v_desired) / in.v_desired);

  r.aggregate = aggregate_score(r, th);
  return r;
}

double aggregate_score(const MetricReport& r, const MetricThresholds& th) {
  th.validate();
  const double blend = th.w_ttc * r.ttc_score + th.w_comfort * r.comfort +
                       th.w_progress * r.progress +
                       th.w_style * r.style_alignment;
  return (r.nc / 100.0) * (r.dac / 100.0) * blend;
}

std::string metrics_csv_header() {
  return "scenario,style,seed,nc,dac,ttc_score,min_ttc,comfort,progress,"
         "style_alignment,aggregate,mean_speed,max_accel,max_jerk";
}

std::string metrics_csv_row(const std::string& scenario_id,
                            const std::string& style, std::uint64_t seed,
                            const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%s,%s,%llu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,"
                "%.4f",
                scenario_id.c_str(), style.c_str(),
                static_cast<unsigned long long>(seed), r.nc, r.dac, r.ttc_score,
                r.min_ttc, r.comfort, r.progress, r.style_alignment,
                r.aggregate, r.mean_speed, r.max_accel, r.max_jerk);
  return buf;
}

}  // namespace stylediff
