#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stylediff/rng.hpp"

namespace stylediff {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
  bool operator==(const Vec2&) const = default;
};

// Wrap an angle into (-pi, pi].
double wrap_angle(double a);

// Polyline geometry shared by the generators, the corridor metrics and the
// closed-loop harness.  Polylines are ordered vertex lists with at least two
// points.
namespace geom {

std::vector<double> cumulative_lengths(const std::vector<Vec2>& pts);
double total_length(const std::vector<Vec2>& pts);
Vec2 point_at_s(const std::vector<Vec2>& pts, double s);     // clamped
double heading_at_s(const std::vector<Vec2>& pts, double s);  // radians
// Arc-length coordinate of the closest point on the polyline.
double project_s(const std::vector<Vec2>& pts, Vec2 p);
// Unsigned distance from p to the polyline.
double lateral_distance(const std::vector<Vec2>& pts, Vec2 p);
// Parallel offset: positive d shifts every vertex along the local left
// normal.  Exact for straights and concentric for arcs.
std::vector<Vec2> offset_polyline(const std::vector<Vec2>& pts, double d);
// Signed curvature per vertex: finite difference of segment heading over the
// local arc length.  Endpoints copy their neighbour.
std::vector<double> curvature_of(const std::vector<Vec2>& pts);

}  // namespace geom

// ---------------------------------------------------------------------------
// World state

struct AgentState {
  Vec2 position;
  Vec2 velocity;
  double confidence = 1.0;  // perception confidence in [0, 1]
  bool in_range = true;     // inside the perception radius
  bool operator==(const AgentState&) const = default;
};

enum class LightPhase { kRed, kYellow, kGreen };

const char* to_string(LightPhase p);
LightPhase light_phase_from_string(const std::string& s);

struct TrafficLight {
  Vec2 position;
  LightPhase phase = LightPhase::kGreen;
  bool operator==(const TrafficLight&) const = default;
};

struct Lane {
  std::vector<Vec2> points;  // centerline, >= 2 points
  double speed_limit = 10.0;  // m/s, > 0
  double width = 3.5;        // m, > 0
  bool operator==(const Lane&) const = default;
};

struct EgoState {
  Vec2 position;
  double heading = 0.0;  // radians
  double speed = 0.0;    // m/s
  bool operator==(const EgoState&) const = default;
};

enum class ScenarioKind { kStraight, kCurve, kIntersection, kMerge };

const char* to_string(ScenarioKind k);
ScenarioKind scenario_kind_from_string(const std::string& s);

struct Scenario {
  EgoState ego;
  std::vector<AgentState> agents;
  std::vector<Lane> lanes;
  std::vector<Vec2> route;  // reference path for the ego, ego-frame
  std::vector<TrafficLight> traffic_lights;

  // Derived fields, recomputed whenever the scene changes.
  std::vector<double> curvature_profile;  // per route vertex
  double density = 0.0;  // agents within 50 m of the ego, divided by 0.5

  // Provenance.
  ScenarioKind kind = ScenarioKind::kStraight;
  std::uint64_t seed = 0;

  void recompute_derived();
};

struct GeneratorParams {
  int agent_count = 8;       // [0, 100]
  int lane_count = 2;        // [1, 4]
  double speed_limit = 10.0; // m/s, (0, 40]
  double route_length = 200.0;  // m, [50, 500]
  double lane_width = 3.5;   // m, [2.5, 5]

  void validate() const;  // throws ConfigError
};

// Deterministic synthetic scene for (kind, seed, params): same inputs give a
// byte-identical JSON serialization.  The ego starts at the origin heading
// +x; its lane is kept clear for the first 25 m and same-lane agents have at
// least 15 m bumper gaps, so an initial collision-free corridor exists.
Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed,
                           const GeneratorParams& params);

// Advance all agents by constant velocity over dt seconds and refresh the
// derived fields.  Ego, lanes, route and lights are unchanged.
Scenario step_agents(const Scenario& s, double dt);

// Per-agent validity: usable for attention iff confidence >= threshold and
// the agent is inside perception range.
std::vector<bool> validity_mask(const Scenario& s,
                                double confidence_threshold = 0.6);

// JSON serialization (format_version 1).  Round-trips bit-exactly.
std::string scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const std::string& text);
void save_scenario(const Scenario& s, const std::string& path);
Scenario load_scenario(const std::string& path);

}  // namespace stylediff
