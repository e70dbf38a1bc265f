#pragma once

#include <string>
#include <vector>

#include "stylediff/scenario.hpp"
#include "stylediff/tensor.hpp"

namespace stylediff {

struct MetricThresholds {
  double ego_radius = 1.0;    // m, collision disc of the ego
  double agent_radius = 1.0;  // m, collision disc of every agent
  double ttc_full = 3.0;      // s; TTC at or above this scores 100
  double accel_limit = 3.0;   // m/s^2 comfort bound
  double jerk_limit = 5.0;    // m/s^3 comfort bound
  double w_ttc = 0.3;
  double w_comfort = 0.2;
  double w_progress = 0.3;
  double w_style = 0.2;

  void validate() const;
};

struct MetricReport {
  double nc = 100.0;         // no-collision gate: 100 or 0
  double dac = 100.0;        // drivable-area compliance, percent of points
  double ttc_score = 100.0;  // 100 at >= ttc_full seconds, linear to 0
  double min_ttc = 999.0;    // raw seconds, capped at 999 when no conflict
  double comfort = 100.0;    // 100 * (1 - violating step fraction)
  double progress = 0.0;     // route progress vs. reference, percent
  double style_alignment = 0.0;  // 100 * exp(-|mean v - v_des| / v_des)
  double aggregate = 0.0;

  // Diagnostics, not part of the aggregate.
  double mean_speed = 0.0;  // m/s
  double max_accel = 0.0;   // m/s^2
  double max_jerk = 0.0;    // m/s^3
};

// Everything needed to score one executed/planned trajectory.  Point k of the
// trajectory is reached at time (k + 1) * dt; scenes[k] describes the world at
// that same time (agents advanced, lanes/route static).
struct EvaluationInput {
  Tensor trajectory;  // K x 2, metric
  double dt = 0.1;
  std::vector<Scenario> scenes;  // size K
  std::vector<Vec2> route;       // reference path for progress
  std::vector<Lane> lanes;       // corridor definition
  double v_desired = 10.0;       // m/s, > 0
  Vec2 initial_position;         // ego position at time 0
  double initial_speed = 0.0;    // m/s at time 0
};

// Open-loop convenience: agents are rolled forward at constant velocity from
// the given scene; route/lanes/initial state are taken from it.
EvaluationInput make_open_loop_input(const Scenario& scene, const Tensor& traj,
                                     double dt, double v_desired);

MetricReport compute_metrics(const EvaluationInput& in,
                             const MetricThresholds& th);

// aggregate = (nc/100) * (dac/100) *
//             (w_ttc * ttc + w_comfort * comfort + w_progress * progress +
//              w_style * style_alignment)
double aggregate_score(const MetricReport& r, const MetricThresholds& th);

// CSV row helpers (one row per scored run).
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& scenario_id,
                            const std::string& style, std::uint64_t seed,
                            const MetricReport& r);

}  // namespace stylediff
