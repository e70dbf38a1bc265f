#include "stylediff/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "stylediff/error.hpp"

namespace stylediff {

double wrap_angle(double a) {
  while (a > 3.14159265358979323846) a -= 2.0 * 3.14159265358979323846;
  while (a <= -3.14159265358979323846) a += 2.0 * 3.14159265358979323846;
  return a;
}

namespace geom {

std::vector<double> cumulative_lengths(const std::vector<Vec2>& pts) {
  if (pts.size() < 2) throw InputError("polyline needs at least two points");
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i)
    cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  return cum;
}

double total_length(const std::vector<Vec2>& pts) {
  return cumulative_lengths(pts).back();
}

Vec2 point_at_s(const std::vector<Vec2>& pts, double s) {
  const auto cum = cumulative_lengths(pts);
  if (s <= 0.0) return pts.front();
  if (s >= cum.back()) return pts.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), s);
  const std::size_t i = static_cast<std::size_t>(it - cum.begin());
  const double seg = cum[i] - cum[i - 1];
  const double t = seg > 0.0 ? (s - cum[i - 1]) / seg : 0.0;
  return pts[i - 1] + (pts[i] - pts[i - 1]) * t;
}

double heading_at_s(const std::vector<Vec2>& pts, double s) {
  const auto cum = cumulative_lengths(pts);
  std::size_t i = 1;
  while (i + 1 < pts.size() && cum[i] < s) ++i;
  const Vec2 d = pts[i] - pts[i - 1];
  return std::atan2(d.y, d.x);
}

double project_s(const std::vector<Vec2>& pts, Vec2 p) {
  const auto cum = cumulative_lengths(pts);
  double best_d2 = std::numeric_limits<double>::infinity();
  double best_s = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec2 a = pts[i];
    const Vec2 ab = pts[i + 1] - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    const double d2 = (p - q).dot(p - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      best_s = cum[i] + std::sqrt(len2) * t;
    }
  }
  return best_s;
}

double lateral_distance(const std::vector<Vec2>& pts, Vec2 p) {
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec2 a = pts[i];
    const Vec2 ab = pts[i + 1] - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    best_d2 = std::min(best_d2, (p - q).dot(p - q));
  }
  return std::sqrt(best_d2);
}

std::vector<Vec2> offset_polyline(const std::vector<Vec2>& pts, double d) {
  if (pts.size() < 2) throw InputError("polyline needs at least two points");
  std::vector<Vec2> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Vec2 a = i == 0 ? pts[0] : pts[i - 1];
    const Vec2 b = i + 1 == pts.size() ? pts[i] : pts[i + 1];
    Vec2 dir = b - a;
    const double n = dir.norm();
    if (n > 0.0) dir = dir * (1.0 / n);
    const Vec2 left{-dir.y, dir.x};
    out[i] = pts[i] + left * d;
  }
  return out;
}

std::vector<double> curvature_of(const std::vector<Vec2>& pts) {
  std::vector<double> c(pts.size(), 0.0);
  if (pts.size() < 3) return c;
  std::vector<double> heading(pts.size() - 1);
  std::vector<double> seglen(pts.size() - 1);
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const Vec2 d = pts[i + 1] - pts[i];
    heading[i] = std::atan2(d.y, d.x);
    seglen[i] = d.norm();
  }
  for (std::size_t k = 1; k + 1 < pts.size(); ++k) {
    const double ds = 0.5 * (seglen[k - 1] + seglen[k]);
    c[k] = ds > 0.0 ? wrap_angle(heading[k] - heading[k - 1]) / ds : 0.0;
  }
  c.front() = c[1];
  c.back() = c[pts.size() - 2];
  return c;
}

}  // namespace geom

// ---------------------------------------------------------------------------
// Enums

const char* to_string(LightPhase p) {
  switch (p) {
    case LightPhase::kRed: return "red";
    case LightPhase::kYellow: return "yellow";
    case LightPhase::kGreen: return "green";
  }
  return "green";
}

LightPhase light_phase_from_string(const std::string& s) {
  if (s == "red") return LightPhase::kRed;
  if (s == "yellow") return LightPhase::kYellow;
  if (s == "green") return LightPhase::kGreen;
  throw InputError("unknown light phase: " + s);
}

const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kStraight: return "straight";
    case ScenarioKind::kCurve: return "curve";
    case ScenarioKind::kIntersection: return "intersection";
    case ScenarioKind::kMerge: return "merge";
  }
  return "straight";
}

ScenarioKind scenario_kind_from_string(const std::string& s) {
  if (s == "straight") return ScenarioKind::kStraight;
  if (s == "curve") return ScenarioKind::kCurve;
  if (s == "intersection") return ScenarioKind::kIntersection;
  if (s == "merge") return ScenarioKind::kMerge;
  throw InputError("unknown scenario kind: " + s);
}

// ---------------------------------------------------------------------------
// Derived fields

void Scenario::recompute_derived() {
  curvature_profile = geom::curvature_of(route);
  int near = 0;
  for (const auto& a : agents)
    if ((a.position - ego.position).norm() <= 50.0) ++near;
  density = static_cast<double>(near) / 0.5;
}

void GeneratorParams::validate() const {
  if (agent_count < 0 || agent_count > 100)
    throw ConfigError("agent_count must be in [0, 100]");
  if (lane_count < 1 || lane_count > 4)
    throw ConfigError("lane_count must be in [1, 4]");
  if (!(speed_limit > 0.0) || speed_limit > 40.0)
    throw ConfigError("speed_limit must be in (0, 40]");
  if (route_length < 50.0 || route_length > 500.0)
    throw ConfigError("route_length must be in [50, 500]");
  if (lane_width < 2.5 || lane_width > 5.0)
    throw ConfigError("lane_width must be in [2.5, 5]");
}

// ---------------------------------------------------------------------------
// Generators

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kPerceptionRange = 120.0;

std::vector<Vec2> straight_path(Vec2 start, double heading, double length,
                                double step) {
  const int n = std::max(1, static_cast<int>(std::lround(length / step)));
  const Vec2 dir{std::cos(heading), std::sin(heading)};
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i)
    pts.push_back(start + dir * (length * static_cast<double>(i) / n));
  return pts;
}

// Appends an arc of |angle| radians and radius r, turning left for positive
// angle.  pos/heading are updated to the arc end.
void append_arc(std::vector<Vec2>& pts, Vec2& pos, double& heading, double r,
                double angle, double step) {
  const int n = std::max(2, static_cast<int>(std::lround(std::abs(angle) * r / step)));
  const double sgn = angle >= 0.0 ? 1.0 : -1.0;
  const Vec2 center = pos + Vec2{-std::sin(heading), std::cos(heading)} * (sgn * r);
  for (int i = 1; i <= n; ++i) {
    const double a = heading + angle * static_cast<double>(i) / n;
    const Vec2 radial{std::sin(a), -std::cos(a)};
    pts.push_back(center + radial * (sgn * r));
  }
  pos = pts.back();
  heading += angle;
}

void append_straight(std::vector<Vec2>& pts, Vec2& pos, double heading,
                     double length, double step) {
  const int n = std::max(1, static_cast<int>(std::lround(length / step)));
  const Vec2 dir{std::cos(heading), std::sin(heading)};
  for (int i = 1; i <= n; ++i)
    pts.push_back(pos + dir * (length * static_cast<double>(i) / n));
  pos = pts.back();
}

struct TrafficLane {
  std::vector<Vec2> points;
  double min_s = 10.0;  // keep-out zone near the lane start
};

void place_agents(Scenario& s, const std::vector<TrafficLane>& traffic_lanes,
                  const GeneratorParams& params, Rng& rng) {
  // Per-lane occupied arc-length slots, used to keep bumper gaps.
  std::vector<std::vector<double>> taken(traffic_lanes.size());
  for (int a = 0; a < params.agent_count; ++a) {
    int lane_idx = 0;
    double s_pos = 0.0;
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      const double gap = attempt < 40 ? 15.0 : 6.0;
      lane_idx = rng.uniform_int(static_cast<int>(traffic_lanes.size()));
      const auto& lane = traffic_lanes[static_cast<std::size_t>(lane_idx)];
      const double len = geom::total_length(lane.points);
      const double hi = len - 5.0;
      if (hi <= lane.min_s) continue;
      s_pos = rng.uniform(lane.min_s, hi);
      placed = true;
      for (double other : taken[static_cast<std::size_t>(lane_idx)])
        if (std::abs(other - s_pos) < gap) {
          placed = false;
          break;
        }
    }
    if (!placed) continue;  // scene is saturated; skip the remainder
    taken[static_cast<std::size_t>(lane_idx)].push_back(s_pos);

    const auto& lane = traffic_lanes[static_cast<std::size_t>(lane_idx)];
    const double heading = geom::heading_at_s(lane.points, s_pos);
    const double jitter_span = std::max(0.0, params.lane_width / 2.0 - 1.2);
    const double jitter = rng.uniform(-jitter_span, jitter_span);
    const Vec2 left{-std::sin(heading), std::cos(heading)};
    AgentState agent;
    agent.position = geom::point_at_s(lane.points, s_pos) + left * jitter;
    const double speed = rng.uniform(0.5, 0.95) * params.speed_limit;
    agent.velocity = Vec2{std::cos(heading), std::sin(heading)} * speed;
    agent.confidence = rng.uniform() < 0.8 ? rng.uniform(0.7, 1.0)
                                           : rng.uniform(0.3, 0.6);
    agent.in_range = agent.position.norm() <= kPerceptionRange;
    s.agents.push_back(agent);
  }
}

}  // namespace

Scenario generate_scenario(ScenarioKind kind, std::uint64_t seed,
                           const GeneratorParams& params) {
  params.validate();
  Rng rng = Rng(seed).split("scenario").split(to_string(kind));

  Scenario s;
  s.kind = kind;
  s.seed = seed;
  const double w = params.lane_width;
  const double length = params.route_length;
  std::vector<TrafficLane> extra_lanes;

  switch (kind) {
    case ScenarioKind::kStraight: {
      s.route = straight_path({0.0, 0.0}, 0.0, length, 5.0);
      break;
    }
    case ScenarioKind::kCurve: {
      const double r = rng.uniform(40.0, 80.0);
      const double sgn = rng.uniform() < 0.5 ? 1.0 : -1.0;
      const double angle = sgn * std::min(length / r, 2.4);
      std::vector<Vec2> pts{{0.0, 0.0}};
      Vec2 pos{0.0, 0.0};
      double heading = 0.0;
      append_arc(pts, pos, heading, r, angle, 3.0);
      s.route = std::move(pts);
      break;
    }
    case ScenarioKind::kIntersection: {
      const double sgn = rng.uniform() < 0.5 ? 1.0 : -1.0;
      const double d1 = 0.4 * length;
      const double turn_r = 18.0;
      std::vector<Vec2> pts{{0.0, 0.0}};
      Vec2 pos{0.0, 0.0};
      double heading = 0.0;
      append_straight(pts, pos, heading, d1, 4.0);
      const Vec2 entry = pos;
      append_arc(pts, pos, heading, turn_r, sgn * kPi / 2.0, 3.0);
      const Vec2 exit_pos = pos;
      const double arc_len = turn_r * kPi / 2.0;
      append_straight(pts, pos, heading,
                      std::max(20.0, length - d1 - arc_len), 4.0);
      s.route = std::move(pts);

      // Cross street: oncoming side of the road the ego turns onto.
      const Vec2 u{std::cos(heading), std::sin(heading)};
      TrafficLane cross;
      cross.points = straight_path(exit_pos - u * 110.0, heading, 100.0, 5.0);
      cross.min_s = 10.0;
      extra_lanes.push_back(std::move(cross));

      TrafficLight light;
      light.position = entry;
      const double u01 = rng.uniform();
      light.phase = u01 < 0.6   ? LightPhase::kGreen
                    : u01 < 0.85 ? LightPhase::kRed
                                 : LightPhase::kYellow;
      s.traffic_lights.push_back(light);
      break;
    }
    case ScenarioKind::kMerge: {
      s.route = straight_path({0.0, 0.0}, 0.0, length, 5.0);
      // On-ramp on the right that reaches the ego lane at ~55% of the route.
      const double x0 = 5.0, x1 = 0.55 * length;
      const double y0 = -2.2 * w;
      TrafficLane ramp;
      const int n = std::max(4, static_cast<int>((x1 - x0) / 4.0));
      for (int i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / n;
        const double blend = t * t * (3.0 - 2.0 * t);  // smoothstep
        ramp.points.push_back({x0 + (x1 - x0) * t, y0 * (1.0 - blend)});
      }
      ramp.min_s = 5.0;
      extra_lanes.push_back(std::move(ramp));
      break;
    }
  }

  for (int i = 0; i < params.lane_count; ++i) {
    Lane lane;
    lane.points = i == 0 ? s.route : geom::offset_polyline(s.route, i * w);
    lane.speed_limit = params.speed_limit;
    lane.width = w;
    s.lanes.push_back(std::move(lane));
  }
  for (const auto& extra : extra_lanes) {
    Lane lane;
    lane.points = extra.points;
    lane.speed_limit = params.speed_limit;
    lane.width = w;
    s.lanes.push_back(std::move(lane));
  }

  s.ego.position = {0.0, 0.0};
  s.ego.heading = 0.0;
  s.ego.speed = 0.8 * params.speed_limit;

  std::vector<TrafficLane> traffic_lanes;
  for (int i = 0; i < params.lane_count; ++i) {
    TrafficLane t;
    t.points = s.lanes[static_cast<std::size_t>(i)].points;
    t.min_s = i == 0 ? 25.0 : 10.0;  // keep the ego's own lane clear ahead
    traffic_lanes.push_back(std::move(t));
  }
  for (auto& extra : extra_lanes) traffic_lanes.push_back(std::move(extra));
  place_agents(s, traffic_lanes, params, rng);

  s.recompute_derived();
  return s;
}

Scenario step_agents(const Scenario& s, double dt) {
  if (!(dt >= 0.0) || !std::isfinite(dt))
    throw InputError("step_agents: dt must be finite and non-negative");
  Scenario out = s;
  for (auto& a : out.agents) a.position = a.position + a.velocity * dt;
  out.recompute_derived();
  return out;
}

std::vector<bool> validity_mask(const Scenario& s,
                                double confidence_threshold) {
  std::vector<bool> mask(s.agents.size());
  for (std::size_t i = 0; i < s.agents.size(); ++i)
    mask[i] = s.agents[i].confidence >= confidence_threshold &&
              s.agents[i].in_range;
  return mask;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

using nlohmann::json;

json vec2_to_json(Vec2 v) { return json::array({v.x, v.y}); }

Vec2 vec2_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2)
    throw InputError("scenario json: expected [x, y] pair");
  Vec2 v{j[0].get<double>(), j[1].get<double>()};
  if (!std::isfinite(v.x) || !std::isfinite(v.y))
    throw InputError("scenario json: non-finite coordinate");
  return v;
}

const json& require(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end())
    throw InputError(std::string("scenario json: missing key '") + key + "'");
  return *it;
}

}  // namespace

std::string scenario_to_json(const Scenario& s) {
  json j;
  j["format_version"] = 1;
  j["ego"] = {{"position", vec2_to_json(s.ego.position)},
              {"heading", s.ego.heading},
              {"speed", s.ego.speed}};
  j["agents"] = json::array();
  for (const auto& a : s.agents)
    j["agents"].push_back({{"position", vec2_to_json(a.position)},
                           {"velocity", vec2_to_json(a.velocity)},
                           {"confidence", a.confidence},
                           {"in_range", a.in_range}});
  j["lanes"] = json::array();
  for (const auto& l : s.lanes) {
    json pts = json::array();
    for (Vec2 p : l.points) pts.push_back(vec2_to_json(p));
    j["lanes"].push_back({{"points", std::move(pts)},
                          {"speed_limit", l.speed_limit},
                          {"width", l.width}});
  }
  json route = json::array();
  for (Vec2 p : s.route) route.push_back(vec2_to_json(p));
  j["route"] = std::move(route);
  j["traffic_lights"] = json::array();
  for (const auto& t : s.traffic_lights)
    j["traffic_lights"].push_back(
        {{"position", vec2_to_json(t.position)}, {"phase", to_string(t.phase)}});
  j["derived"] = {{"curvature_profile", s.curvature_profile},
                  {"density", s.density}};
  j["meta"] = {{"kind", to_string(s.kind)}, {"seed", s.seed}};
  return j.dump(2) + "\n";
}

Scenario scenario_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("scenario json: parse failure: ") + e.what());
  }
  try {
    const int version = require(j, "format_version").get<int>();
    if (version != 1)
      throw InputError("scenario json: unsupported format_version " +
                       std::to_string(version));
    Scenario s;
    const json& ego = require(j, "ego");
    s.ego.position = vec2_from_json(require(ego, "position"));
    s.ego.heading = require(ego, "heading").get<double>();
    s.ego.speed = require(ego, "speed").get<double>();
    if (!std::isfinite(s.ego.heading) || !std::isfinite(s.ego.speed))
      throw InputError("scenario json: non-finite ego state");
    for (const json& a : require(j, "agents")) {
      AgentState agent;
      agent.position = vec2_from_json(require(a, "position"));
      agent.velocity = vec2_from_json(require(a, "velocity"));
      agent.confidence = require(a, "confidence").get<double>();
      agent.in_range = require(a, "in_range").get<bool>();
      if (!std::isfinite(agent.confidence) || agent.confidence < 0.0 ||
          agent.confidence > 1.0)
        throw InputError("scenario json: confidence outside [0, 1]");
      s.agents.push_back(agent);
    }
    for (const json& l : require(j, "lanes")) {
      Lane lane;
      for (const json& p : require(l, "points"))
        lane.points.push_back(vec2_from_json(p));
      lane.speed_limit = require(l, "speed_limit").get<double>();
      lane.width = require(l, "width").get<double>();
      if (!(lane.speed_limit > 0.0) || !(lane.width > 0.0))
        throw InputError("scenario json: lane speed_limit/width must be > 0");
      if (lane.points.size() < 2)
        throw InputError("scenario json: lane needs at least two points");
      s.lanes.push_back(std::move(lane));
    }
    for (const json& p : require(j, "route"))
      s.route.push_back(vec2_from_json(p));
    if (s.route.size() < 2)
      throw InputError("scenario json: route needs at least two points");
    for (const json& t : require(j, "traffic_lights")) {
      TrafficLight light;
      light.position = vec2_from_json(require(t, "position"));
      light.phase = light_phase_from_string(require(t, "phase").get<std::string>());
      s.traffic_lights.push_back(light);
    }
    const json& meta = require(j, "meta");
    s.kind = scenario_kind_from_string(require(meta, "kind").get<std::string>());
    s.seed = require(meta, "seed").get<std::uint64_t>();
    s.recompute_derived();  // derived block in the file is informational
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("scenario json: bad field type: ") + e.what());
  }
}

void save_scenario(const Scenario& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << scenario_to_json(s);
  if (!f) throw IoError("write failed: " + path);
}

Scenario load_scenario(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return scenario_from_json(ss.str());
}

}  // namespace stylediff
