// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "trajkit/geometry.hpp"
#include "trajkit/scene.hpp"

namespace trajkit {

/// Per-trajectory driving sub-metric vector, every field in [0,1].
/// Discrete ranges: nc, dac, tlc in {0,1}; ddc in {0, 0.5, 1}.
struct SubMetricScores {
  double nc = 1.0;       // no collision
  double dac = 1.0;      // drivable-area compliance
  double ddc = 1.0;      // driving-direction compliance
  double tlc = 1.0;      // traffic-light compliance
  double ep = 1.0;       // ego progress
  double ttc = 1.0;      // time-to-collision margin
  double comfort = 1.0;  // acceleration/jerk bounds
  double lk = 1.0;       // lane keeping
  double hc = 1.0;       // comfort over the first half horizon
  double ec = 1.0;       // consistency with the previous replan

  static constexpr std::size_t kCount = 10;

  static const std::array<std::string, kCount>& names() {
    static const std::array<std::string, kCount> n = {"nc", "dac", "ddc", "tlc",    "ep",
                                                      "ttc", "comfort", "lk", "hc", "ec"};
    return n;
  }

  double get(std::size_t i) const {
    const std::array<double, kCount> v = {nc, dac, ddc, tlc, ep, ttc, comfort, lk, hc, ec};
    return v.at(i);
  }

  double get(const std::string& name) const {
    const auto& n = names();
    for (std::size_t i = 0; i < kCount; ++i)
      if (n[i] == name) return get(i);
    throw std::invalid_argument("unknown sub-metric: " + name);
  }

  void set(std::size_t i, double v) {
    double* fields[kCount] = {&nc, &dac, &ddc, &tlc, &ep, &ttc, &comfort, &lk, &hc, &ec};
    *fields[i] = v;
  }
};

/// Metric weighting: which metrics multiply as penalties, which average with
/// what weight, and the log-domain ensemble coefficients used for predicted
/// score fusion.
struct MetricWeights {
  std::vector<std::string> penalty_set = {"nc", "dac", "ddc", "tlc"};
  std::vector<std::pair<std::string, double>> avg_set = {{"ep", 5.0}, {"ttc", 5.0}, {"comfort", 2.0},
                                                         {"lk", 2.0}, {"hc", 2.0},  {"ec", 1.0}};
  std::map<std::string, double> ensemble_penalty = {{"nc", 0.5}, {"dac", 0.5}, {"ddc", 0.3}, {"tlc", 0.1}};
  std::map<std::string, double> ensemble_average = {{"ep", 5.0}, {"ttc", 5.0}, {"lk", 2.0}, {"hc", 1.0}};
  double lambda_avg = 6.0;

  void validate() const {
    double total = 0.0;
    for (const auto& [name, w] : avg_set) {
      if (w < 0.0) throw std::invalid_argument("metric weights: negative average weight for " + name);
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("metric weights: average weights must not all be zero");
    for (const auto& [name, w] : ensemble_penalty)
      if (w < 0.0) throw std::invalid_argument("metric weights: negative ensemble weight for " + name);
    for (const auto& [name, w] : ensemble_average)
      if (w < 0.0) throw std::invalid_argument("metric weights: negative ensemble weight for " + name);
    if (lambda_avg < 0.0) throw std::invalid_argument("metric weights: lambda_avg must be >= 0");
  }
};

enum class PdmsVersion : std::uint8_t { v1 = 1, v2 = 2 };

/// Evaluation constants. Thresholds are configuration, not ground truth; the
/// defaults are ordinary passenger-car values.
struct EvalParams {
  double ego_length = 4.6;
  double ego_width = 1.8;
  double max_accel = 4.0;            // m/s^2
  double max_jerk = 8.0;             // m/s^3
  double lane_halfwidth = 1.75;      // m
  double ttc_horizon_s = 2.0;
  double ttc_step_s = 0.1;
  double stop_line_tolerance = 0.2;  // m past the line before TLC trips
  double ec_accel_threshold = 2.0;   // m/s^2 between consecutive replans
  double min_ep_reference = 1.0;     // m, floor on the progress denominator
};

namespace detail {

// Speeds, acceleration and jerk magnitudes from finite differences over the
// point list (which includes the ego origin as point zero).
struct MotionProfile {
  std::vector<Vec2> velocity;
  std::vector<Vec2> accel;
  std::vector<double> accel_mag;
  std::vector<double> jerk_mag;
};

inline MotionProfile motion_profile(const std::vector<Vec2>& pts, double dt) {
  MotionProfile m;
  if (pts.size() < 2) return m;
  m.velocity.resize(pts.size() - 1);
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) m.velocity[i] = (1.0 / dt) * (pts[i + 1] - pts[i]);
  if (m.velocity.size() >= 2) {
    m.accel.resize(m.velocity.size() - 1);
    m.accel_mag.resize(m.accel.size());
    for (std::size_t i = 0; i + 1 < m.velocity.size(); ++i) {
      m.accel[i] = (1.0 / dt) * (m.velocity[i + 1] - m.velocity[i]);
      m.accel_mag[i] = norm(m.accel[i]);
    }
  }
  if (m.accel.size() >= 2) {
    m.jerk_mag.resize(m.accel.size() - 1);
    for (std::size_t i = 0; i + 1 < m.accel.size(); ++i)
      m.jerk_mag[i] = norm((1.0 / dt) * (m.accel[i + 1] - m.accel[i]));
  }
  return m;
}

inline bool comfort_ok(const MotionProfile& m, const EvalParams& p) {
  for (double a : m.accel_mag)
    if (a > p.max_accel) return false;
  for (double j : m.jerk_mag)
    if (j > p.max_jerk) return false;
  return true;
}

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

}  // namespace detail

/// Deterministic sub-metric evaluation of an ego-frame trajectory against a
/// scene. Waypoint index t is reached at time (t+1) * timestep. Throws
/// std::out_of_range if any waypoint leaves the scene grid window.
inline SubMetricScores eval_submetrics(const Scene& scene, const Trajectory& traj,
                                       const EvalParams& params = {}) {
  validate_trajectory(traj);
  const double dt = traj.timestep_s;
  const std::size_t T = traj.waypoints.size();

  std::vector<Vec2> world(T);
  for (std::size_t t = 0; t < T; ++t) {
    world[t] = scene.to_world(traj.waypoints[t]);
    if (!scene.drivable.contains(world[t])) throw std::out_of_range("trajectory outside scene grid window");
  }

  std::vector<Vec2> pts;
  pts.reserve(T + 1);
  pts.push_back(scene.ego.position);
  pts.insert(pts.end(), world.begin(), world.end());

  // Motion heading per waypoint; stationary segments inherit the last one.
  std::vector<double> heading(T);
  double prev_heading = scene.ego.heading;
  for (std::size_t t = 0; t < T; ++t) {
    const Vec2 d = pts[t + 1] - pts[t];
    if (norm(d) > 1e-6) prev_heading = std::atan2(d.y, d.x);
    heading[t] = prev_heading;
  }

  SubMetricScores s;

  // --- no collision: ego footprint vs agents propagated to waypoint time
  for (std::size_t t = 0; t < T && s.nc > 0.0; ++t) {
    const double time = static_cast<double>(t + 1) * dt;
    const OrientedBox ego{world[t], params.ego_length, params.ego_width, heading[t]};
    for (const Agent& a : scene.agents) {
      if (obb_overlap(ego, a.footprint_at(time))) {
        s.nc = 0.0;
        break;
      }
    }
  }

  // --- drivable area: every waypoint on a drivable cell
  for (std::size_t t = 0; t < T; ++t) {
    if (!scene.drivable.is_drivable(world[t])) {
      s.dac = 0.0;
      break;
    }
  }

  // --- progress along the route
  const double s_start = scene.centerline.project(scene.ego.position).s;
  double s_max = s_start;
  for (std::size_t t = 0; t < T; ++t) s_max = std::max(s_max, scene.centerline.project(world[t]).s);
  const double reference = std::max(params.min_ep_reference, scene.ego.speed * traj.horizon_s());
  s.ep = std::clamp((s_max - s_start) / reference, 0.0, 1.0);

  // --- time-to-collision margin: constant-velocity forward projection
  {
    const detail::MotionProfile motion = detail::motion_profile(pts, dt);
    bool hit = false;
    for (std::size_t t = 0; t < T && !hit; ++t) {
      const double base_time = static_cast<double>(t + 1) * dt;
      const Vec2 vel = motion.velocity[t];
      for (double u = params.ttc_step_s; u <= params.ttc_horizon_s + 1e-9 && !hit; u += params.ttc_step_s) {
        const OrientedBox ego{world[t] + u * vel, params.ego_length, params.ego_width, heading[t]};
        for (const Agent& a : scene.agents) {
          if (obb_overlap(ego, a.footprint_at(base_time + u))) {
            hit = true;
            break;
          }
        }
      }
    }
    s.ttc = hit ? 0.0 : 1.0;

    // --- comfort over the full horizon and over the first half
    s.comfort = detail::comfort_ok(motion, params) ? 1.0 : 0.0;
    const std::size_t half = (T + 1) / 2;
    std::vector<Vec2> half_pts(pts.begin(), pts.begin() + static_cast<std::ptrdiff_t>(half + 1));
    s.hc = detail::comfort_ok(detail::motion_profile(half_pts, dt), params) ? 1.0 : 0.0;

    // --- consistency with the previous replan: compare acceleration
    // magnitude profiles shifted by one step (the previous plan started one
    // cycle earlier). Defaults to 1 when no previous plan is stored.
    if (scene.previous_plan) {
      std::vector<Vec2> prev_pts;
      prev_pts.push_back({0.0, 0.0});
      for (Vec2 w : scene.previous_plan->waypoints) prev_pts.push_back(w);
      const auto prev_motion = detail::motion_profile(prev_pts, scene.previous_plan->timestep_s);
      const auto& cur = motion.accel_mag;
      const auto& prev = prev_motion.accel_mag;
      for (std::size_t i = 0; i < cur.size(); ++i) {
        const std::size_t pi = i + 1;
        if (pi >= prev.size()) break;
        if (std::abs(cur[i] - prev[pi]) > params.ec_accel_threshold) {
          s.ec = 0.0;
          break;
        }
      }
    }
  }

  // --- lane keeping and driving direction vs the route tangent
  {
    double worst_dev = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const auto proj = scene.centerline.project(world[t]);
      if (std::abs(proj.lateral) > params.lane_halfwidth) s.lk = 0.0;
      const Vec2 seg = pts[t + 1] - pts[t];
      if (norm(seg) > 1e-6)
        worst_dev = std::max(worst_dev, std::abs(detail::wrap_angle(heading[t] - proj.tangent_heading)));
    }
    if (worst_dev < std::numbers::pi / 2.0)
      s.ddc = 1.0;
    else if (worst_dev < 3.0 * std::numbers::pi / 4.0)
      s.ddc = 0.5;
    else
      s.ddc = 0.0;
  }

  // --- traffic light: red signal and any waypoint past the stop line
  if (scene.signal && scene.signal->state == SignalState::red) {
    for (std::size_t t = 0; t < T; ++t) {
      if (scene.centerline.project(world[t]).s > scene.signal->stop_s + params.stop_line_tolerance) {
        s.tlc = 0.0;
        break;
      }
    }
  }

  return s;
}

/// Penalty product times weighted average. v1 uses {nc, dac} x {ep, ttc,
/// comfort}; v2 adds {ddc, tlc} penalties and swaps the average set to
/// {ep, ttc, lk, hc, ec}.
inline double aggregate_pdms(const SubMetricScores& scores, const MetricWeights& weights,
                             PdmsVersion version) {
  weights.validate();
  const std::vector<std::string> pen_names =
      version == PdmsVersion::v1 ? std::vector<std::string>{"nc", "dac"}
                                 : std::vector<std::string>{"nc", "dac", "ddc", "tlc"};
  const std::vector<std::string> avg_names =
      version == PdmsVersion::v1 ? std::vector<std::string>{"ep", "ttc", "comfort"}
                                 : std::vector<std::string>{"ep", "ttc", "lk", "hc", "ec"};

  double penalty = 1.0;
  for (const std::string& name : pen_names) {
    if (std::find(weights.penalty_set.begin(), weights.penalty_set.end(), name) != weights.penalty_set.end())
      penalty *= scores.get(name);
  }

  double num = 0.0, den = 0.0;
  for (const std::string& name : avg_names) {
    for (const auto& [wname, w] : weights.avg_set) {
      if (wname == name) {
        num += w * scores.get(name);
        den += w;
      }
    }
  }
  if (!(den > 0.0)) throw std::invalid_argument("aggregate_pdms: no average metric has positive weight");
  return penalty * (num / den);
}

/// Closed-loop score: per step (nc * dac) times the weighted mean of
/// {ttc, comfort}, averaged over steps, scaled by route completion.
inline double hd_score(const std::vector<SubMetricScores>& step_scores, double route_completion,
                       double ttc_weight = 1.0, double comfort_weight = 1.0) {
  if (step_scores.empty()) throw std::invalid_argument("hd_score: empty step sequence");
  const double wsum = ttc_weight + comfort_weight;
  if (!(wsum > 0.0)) throw std::invalid_argument("hd_score: weights must not both be zero");
  double total = 0.0;
  for (const SubMetricScores& s : step_scores)
    total += (s.nc * s.dac) * (ttc_weight * s.ttc + comfort_weight * s.comfort) / wsum;
  return (total / static_cast<double>(step_scores.size())) * route_completion;
}

}  // namespace trajkit
