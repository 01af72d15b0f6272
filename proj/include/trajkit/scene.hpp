// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajkit/geometry.hpp"
#include "trajkit/rng.hpp"

namespace trajkit {

/// Boolean drivable-area grid over a bounded BEV window. Row-major with y as
/// the outer index; cell (ix, iy) covers
/// [origin + ix*cell, origin + (ix+1)*cell) on each axis.
struct OccupancyGrid {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double cell_size = 0.5;
  std::size_t width = 0;   // cells along x
  std::size_t height = 0;  // cells along y
  std::vector<std::uint8_t> drivable;

  static OccupancyGrid make(double x0, double y0, double x1, double y1, double cell) {
    OccupancyGrid g;
    g.origin_x = x0;
    g.origin_y = y0;
    g.cell_size = cell;
    g.width = static_cast<std::size_t>(std::ceil((x1 - x0) / cell));
    g.height = static_cast<std::size_t>(std::ceil((y1 - y0) / cell));
    g.drivable.assign(g.width * g.height, 0);
    return g;
  }

  bool contains(Vec2 p) const {
    return p.x >= origin_x && p.y >= origin_y && p.x < origin_x + static_cast<double>(width) * cell_size &&
           p.y < origin_y + static_cast<double>(height) * cell_size;
  }

  std::size_t index_of(Vec2 p) const {
    const auto ix = static_cast<std::size_t>((p.x - origin_x) / cell_size);
    const auto iy = static_cast<std::size_t>((p.y - origin_y) / cell_size);
    return iy * width + ix;
  }

  bool is_drivable(Vec2 p) const { return contains(p) && drivable[index_of(p)] != 0; }

  void set_drivable(Vec2 p, bool v) {
    if (contains(p)) drivable[index_of(p)] = v ? 1 : 0;
  }
};

/// Oriented rectangle: center, full extents, heading of the long axis.
struct OrientedBox {
  Vec2 center;
  double length = 0.0;
  double width = 0.0;
  double heading = 0.0;

  std::array<Vec2, 4> corners() const {
    const Vec2 fwd = {std::cos(heading), std::sin(heading)};
    const Vec2 left = {-fwd.y, fwd.x};
    const Vec2 dl = 0.5 * length * fwd;
    const Vec2 dw = 0.5 * width * left;
    return {center + dl + dw, center + dl - dw, center - dl - dw, center - dl + dw};
  }

  bool contains(Vec2 p) const {
    const Vec2 d = p - center;
    const Vec2 fwd = {std::cos(heading), std::sin(heading)};
    const double u = dot(d, fwd);
    const double v = cross(fwd, d);
    return std::abs(u) <= 0.5 * length && std::abs(v) <= 0.5 * width;
  }
};

// Separating-axis test on the four edge normals of two oriented boxes.
inline bool obb_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const Vec2 axes[4] = {{std::cos(a.heading), std::sin(a.heading)},
                        {-std::sin(a.heading), std::cos(a.heading)},
                        {std::cos(b.heading), std::sin(b.heading)},
                        {-std::sin(b.heading), std::cos(b.heading)}};
  for (const Vec2& axis : axes) {
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const Vec2& p : ca) {
      const double t = dot(p, axis);
      amin = std::min(amin, t);
      amax = std::max(amax, t);
    }
    for (const Vec2& p : cb) {
      const double t = dot(p, axis);
      bmin = std::min(bmin, t);
      bmax = std::max(bmax, t);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

/// Dynamic agent with a constant-velocity motion model.
struct Agent {
  OrientedBox footprint;
  Vec2 velocity;  // m/s, world frame

  OrientedBox footprint_at(double t) const {
    OrientedBox b = footprint;
    b.center += t * velocity;
    return b;
  }
};

/// Route polyline with cumulative arc length and point/heading/projection
/// queries.
struct Centerline {
  std::vector<Vec2> points;
  std::vector<double> arc_length;

  static Centerline from_points(std::vector<Vec2> pts) {
    if (pts.size() < 2) throw std::invalid_argument("centerline needs at least 2 points");
    Centerline c;
    c.points = std::move(pts);
    c.arc_length.resize(c.points.size());
    c.arc_length[0] = 0.0;
    for (std::size_t i = 1; i < c.points.size(); ++i)
      c.arc_length[i] = c.arc_length[i - 1] + norm(c.points[i] - c.points[i - 1]);
    return c;
  }

  double length() const { return arc_length.back(); }

  Vec2 point_at(double s) const {
    s = std::clamp(s, 0.0, length());
    const auto it = std::upper_bound(arc_length.begin(), arc_length.end(), s);
    const std::size_t i = std::min<std::size_t>(arc_length.size() - 1,
                                                static_cast<std::size_t>(it - arc_length.begin()));
    if (i == 0) return points.front();
    const double seg = arc_length[i] - arc_length[i - 1];
    const double t = seg > 0.0 ? (s - arc_length[i - 1]) / seg : 0.0;
    return points[i - 1] + t * (points[i] - points[i - 1]);
  }

  double heading_at(double s) const {
    s = std::clamp(s, 0.0, length());
    std::size_t i = 1;
    while (i + 1 < arc_length.size() && arc_length[i] < s) ++i;
    const Vec2 d = points[i] - points[i - 1];
    return std::atan2(d.y, d.x);
  }

  struct Projection {
    double s = 0.0;        // arc length of the closest point
    double lateral = 0.0;  // signed offset, positive left of the tangent
    double distance = 0.0;
    double tangent_heading = 0.0;
  };

  Projection project(Vec2 p) const {
    Projection best;
    double best_d2 = 1e300;
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
      const Vec2 a = points[i];
      const Vec2 ab = points[i + 1] - a;
      const double len2 = squared_norm(ab);
      const double t = len2 > 0.0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
      const Vec2 q = a + t * ab;
      const double d2 = squared_norm(p - q);
      if (d2 < best_d2) {
        best_d2 = d2;
        best.s = arc_length[i] + t * std::sqrt(len2);
        best.tangent_heading = std::atan2(ab.y, ab.x);
        const Vec2 tangent = {std::cos(best.tangent_heading), std::sin(best.tangent_heading)};
        best.lateral = cross(tangent, p - a) >= 0.0 ? std::sqrt(d2) : -std::sqrt(d2);
        best.distance = std::sqrt(d2);
      }
    }
    return best;
  }
};

enum class SignalState : std::uint8_t { green = 0, red = 1 };

struct TrafficSignal {
  SignalState state = SignalState::green;
  double stop_s = 0.0;  // arc length of the stop line along the centerline
};

struct EgoState {
  Vec2 position{0.0, 0.0};
  double heading = 0.0;
  double speed = 0.0;  // m/s
};

enum class ScenarioKind : std::uint8_t { empty = 0, lead_vehicle, cut_in, blocked_lane, intersection };

inline const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::empty: return "empty";
    case ScenarioKind::lead_vehicle: return "lead_vehicle";
    case ScenarioKind::cut_in: return "cut_in";
    case ScenarioKind::blocked_lane: return "blocked_lane";
    case ScenarioKind::intersection: return "intersection";
  }
  return "unknown";
}

inline ScenarioKind scenario_kind_from_string(const std::string& s) {
  if (s == "empty") return ScenarioKind::empty;
  if (s == "lead_vehicle") return ScenarioKind::lead_vehicle;
  if (s == "cut_in") return ScenarioKind::cut_in;
  if (s == "blocked_lane") return ScenarioKind::blocked_lane;
  if (s == "intersection") return ScenarioKind::intersection;
  throw std::invalid_argument("unknown scenario kind: " + s);
}

/// Synthetic BEV world. Geometry is stored in a fixed world frame; the ego
/// pose defines the ego frame trajectories are expressed in. Freshly
/// generated scenes have the ego at the origin heading +x, so both frames
/// coincide until a rollout moves the ego.
struct Scene {
  OccupancyGrid drivable;
  Centerline centerline;
  std::vector<Agent> agents;
  EgoState ego;
  std::optional<TrafficSignal> signal;
  std::optional<Trajectory> previous_plan;  // ego-frame plan from the prior replan cycle
  std::uint64_t seed = 0;
  ScenarioKind kind = ScenarioKind::empty;
  std::string id;

  Vec2 to_world(Vec2 ego_pt) const { return ego.position + rotated(ego_pt, ego.heading); }
  Vec2 to_ego(Vec2 world_pt) const { return rotated(world_pt - ego.position, -ego.heading); }
};

namespace detail {

constexpr double kLaneWidth = 3.5;

inline void paint_corridor(OccupancyGrid& grid, const Centerline& line, double halfwidth) {
  // Mark every cell whose center lies within halfwidth of the polyline.
  for (std::size_t iy = 0; iy < grid.height; ++iy) {
    for (std::size_t ix = 0; ix < grid.width; ++ix) {
      const Vec2 c{grid.origin_x + (static_cast<double>(ix) + 0.5) * grid.cell_size,
                   grid.origin_y + (static_cast<double>(iy) + 0.5) * grid.cell_size};
      if (line.project(c).distance <= halfwidth) grid.drivable[iy * grid.width + ix] = 1;
    }
  }
}

inline std::vector<Vec2> arc_points(double curvature, double arc_len, double step) {
  std::vector<Vec2> pts;
  const int n = static_cast<int>(std::ceil(arc_len / step));
  for (int i = 0; i <= n; ++i) {
    const double s = std::min(arc_len, static_cast<double>(i) * step);
    if (std::abs(curvature) < 1e-9) {
      pts.push_back({s, 0.0});
    } else {
      pts.push_back({std::sin(curvature * s) / curvature, (1.0 - std::cos(curvature * s)) / curvature});
    }
  }
  return pts;
}

}  // namespace detail

/// Deterministic scenario synthesis. Parameter ranges per kind are documented
/// inline; identical (kind, seed) pairs produce bit-identical scenes.
inline Scene generate_scene(ScenarioKind kind, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 101));
  Scene scene;
  scene.seed = seed;
  scene.kind = kind;
  scene.id = std::string(to_string(kind)) + "_" + std::to_string(seed);
  scene.ego.speed = rng.uniform(5.0, 9.0);

  // Route: straight or gently curved arc, 80 m long, starting at the origin.
  // The painted corridor extends another 60 m past the route end so planners
  // near the goal still see drivable space inside the grid window.
  double curvature = 0.0;
  const double route_len = 80.0;
  const double corridor_extension = 60.0;
  switch (kind) {
    case ScenarioKind::empty:
    case ScenarioKind::lead_vehicle:
      curvature = rng.uniform(-0.0025, 0.0025);
      break;
    default:
      curvature = 0.0;  // maneuver scenarios use straight roads
      break;
  }

  std::vector<Vec2> extended = detail::arc_points(curvature, route_len + corridor_extension, 2.0);

  const double block_x = rng.uniform(18.0, 26.0);  // used by blocked_lane
  const double lane_shift_dir = rng.next_double() < 0.5 ? 1.0 : -1.0;
  if (kind == ScenarioKind::blocked_lane) {
    // Route guidance swerves into the adjacent lane around a parked vehicle:
    // smoothstep lateral transition starting 12 m before the blockage.
    const double x0 = block_x - 12.0, x1 = block_x - 2.0;
    for (Vec2& p : extended) {
      double t = std::clamp((p.x - x0) / (x1 - x0), 0.0, 1.0);
      t = t * t * (3.0 - 2.0 * t);
      p.y += lane_shift_dir * detail::kLaneWidth * t;
    }
  }
  const auto route_points = static_cast<std::size_t>(route_len / 2.0) + 1;
  scene.centerline =
      Centerline::from_points(std::vector<Vec2>(extended.begin(), extended.begin() + route_points));
  const Centerline paint_line = Centerline::from_points(extended);

  scene.drivable = OccupancyGrid::make(-15.0, -30.0, 148.0, 30.0, 0.5);
  const double corridor_halfwidth =
      (kind == ScenarioKind::blocked_lane || kind == ScenarioKind::cut_in) ? detail::kLaneWidth * 1.5
                                                                           : detail::kLaneWidth;
  detail::paint_corridor(scene.drivable, paint_line, corridor_halfwidth);
  if (kind == ScenarioKind::intersection) {
    // Crossing road corridor.
    const double cross_x = rng.uniform(28.0, 38.0);
    Centerline cross = Centerline::from_points({{cross_x, -30.0}, {cross_x, 30.0}});
    detail::paint_corridor(scene.drivable, cross, detail::kLaneWidth);

    const bool red = rng.next_double() < 0.5;
    scene.signal = TrafficSignal{red ? SignalState::red : SignalState::green, cross_x - 6.0};

    // Crossing agent timed to reach the intersection around the ego's own
    // arrival; the start offset is clamped into the grid and the speed solved
    // from the arrival time.
    const double side = rng.next_double() < 0.5 ? 1.0 : -1.0;
    const double ego_eta = cross_x / std::max(1.0, scene.ego.speed);
    const double arrival = ego_eta + rng.uniform(-1.0, 3.0);
    double agent_speed = rng.uniform(4.0, 7.0);
    double start_y = agent_speed * arrival;
    if (start_y > 26.0) {
      start_y = 26.0;
      agent_speed = start_y / arrival;
    }
    Agent a;
    a.footprint = {{cross_x, side * start_y}, 4.6, 1.8, -side * std::numbers::pi / 2.0};
    a.velocity = {0.0, -side * agent_speed};
    scene.agents.push_back(a);
  }

  auto agent_on_route = [&](double s, double lateral, double speed_along, double lateral_speed) {
    const Vec2 base = scene.centerline.point_at(s);
    const double h = scene.centerline.heading_at(s);
    const Vec2 left{-std::sin(h), std::cos(h)};
    Agent a;
    a.footprint = {base + lateral * left, 4.6, 1.8, h};
    a.velocity = Vec2{std::cos(h), std::sin(h)} * speed_along + left * lateral_speed;
    return a;
  };

  switch (kind) {
    case ScenarioKind::lead_vehicle: {
      const double gap = rng.uniform(16.0, 30.0);
      const double lead_speed = rng.uniform(2.0, 0.8 * scene.ego.speed);
      scene.agents.push_back(agent_on_route(gap, 0.0, lead_speed, 0.0));
      break;
    }
    case ScenarioKind::cut_in: {
      const double gap = rng.uniform(14.0, 22.0);
      const double side = rng.next_double() < 0.5 ? 1.0 : -1.0;
      const double speed = rng.uniform(3.0, 6.5);
      const double lat_speed = rng.uniform(0.4, 0.9);
      scene.agents.push_back(agent_on_route(gap, side * detail::kLaneWidth, speed, -side * lat_speed));
      break;
    }
    case ScenarioKind::blocked_lane: {
      // Parked van fills the original (pre-shift) lane; straight-through
      // plans cannot squeeze past it.
      Agent a;
      a.footprint = {{block_x, 0.0}, 6.0, 2.6, 0.0};
      a.velocity = {0.0, 0.0};
      scene.agents.push_back(a);
      break;
    }
    default:
      break;
  }

  return scene;
}

// ---------------------------------------------------------------------------
// JSON serialization: grid as run-length-encoded rows, agents and centerline
// as arrays.
// ---------------------------------------------------------------------------

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["id"] = scene.id;
  j["kind"] = to_string(scene.kind);
  j["seed"] = scene.seed;
  j["ego"] = {{"x", scene.ego.position.x},
              {"y", scene.ego.position.y},
              {"heading", scene.ego.heading},
              {"speed", scene.ego.speed}};

  nlohmann::json grid;
  grid["origin_x"] = scene.drivable.origin_x;
  grid["origin_y"] = scene.drivable.origin_y;
  grid["cell_size"] = scene.drivable.cell_size;
  grid["width"] = scene.drivable.width;
  grid["height"] = scene.drivable.height;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t iy = 0; iy < scene.drivable.height; ++iy) {
    // Run lengths alternate starting with the count of non-drivable cells.
    nlohmann::json runs = nlohmann::json::array();
    std::uint8_t cur = 0;
    std::size_t len = 0;
    for (std::size_t ix = 0; ix < scene.drivable.width; ++ix) {
      const std::uint8_t v = scene.drivable.drivable[iy * scene.drivable.width + ix];
      if (v == cur) {
        ++len;
      } else {
        runs.push_back(len);
        cur = v;
        len = 1;
      }
    }
    runs.push_back(len);
    rows.push_back(runs);
  }
  grid["rows_rle"] = rows;
  j["drivable"] = grid;

  nlohmann::json cl = nlohmann::json::array();
  for (Vec2 p : scene.centerline.points) cl.push_back({p.x, p.y});
  j["centerline"] = cl;

  nlohmann::json agents = nlohmann::json::array();
  for (const Agent& a : scene.agents) {
    agents.push_back({a.footprint.center.x, a.footprint.center.y, a.footprint.length, a.footprint.width,
                      a.footprint.heading, a.velocity.x, a.velocity.y});
  }
  j["agents"] = agents;

  if (scene.signal) {
    j["signal"] = {{"state", scene.signal->state == SignalState::red ? "red" : "green"},
                   {"stop_s", scene.signal->stop_s}};
  }
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene scene;
  scene.id = j.at("id").get<std::string>();
  scene.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
  scene.seed = j.at("seed").get<std::uint64_t>();
  scene.ego.position = {j.at("ego").at("x").get<double>(), j.at("ego").at("y").get<double>()};
  scene.ego.heading = j.at("ego").at("heading").get<double>();
  scene.ego.speed = j.at("ego").at("speed").get<double>();

  const auto& grid = j.at("drivable");
  scene.drivable.origin_x = grid.at("origin_x").get<double>();
  scene.drivable.origin_y = grid.at("origin_y").get<double>();
  scene.drivable.cell_size = grid.at("cell_size").get<double>();
  scene.drivable.width = grid.at("width").get<std::size_t>();
  scene.drivable.height = grid.at("height").get<std::size_t>();
  scene.drivable.drivable.assign(scene.drivable.width * scene.drivable.height, 0);
  const auto& rows = grid.at("rows_rle");
  if (rows.size() != scene.drivable.height) throw std::runtime_error("scene json: RLE row count mismatch");
  for (std::size_t iy = 0; iy < scene.drivable.height; ++iy) {
    std::uint8_t cur = 0;
    std::size_t ix = 0;
    for (const auto& run : rows[iy]) {
      const auto len = run.get<std::size_t>();
      for (std::size_t k = 0; k < len; ++k, ++ix) {
        if (ix >= scene.drivable.width) throw std::runtime_error("scene json: RLE row overflow");
        scene.drivable.drivable[iy * scene.drivable.width + ix] = cur;
      }
      cur = cur ? 0 : 1;
    }
    if (ix != scene.drivable.width) throw std::runtime_error("scene json: RLE row underflow");
  }

  std::vector<Vec2> pts;
  for (const auto& p : j.at("centerline")) pts.push_back({p[0].get<double>(), p[1].get<double>()});
  scene.centerline = Centerline::from_points(std::move(pts));

  for (const auto& a : j.at("agents")) {
    Agent agent;
    agent.footprint = {{a[0].get<double>(), a[1].get<double>()}, a[2].get<double>(), a[3].get<double>(),
                       a[4].get<double>()};
    agent.velocity = {a[5].get<double>(), a[6].get<double>()};
    scene.agents.push_back(agent);
  }

  if (j.contains("signal")) {
    TrafficSignal sig;
    sig.state = j.at("signal").at("state").get<std::string>() == "red" ? SignalState::red : SignalState::green;
    sig.stop_s = j.at("signal").at("stop_s").get<double>();
    scene.signal = sig;
  }
  return scene;
}

}  // namespace trajkit
