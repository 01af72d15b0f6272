// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "trajkit/geometry.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/scene.hpp"

namespace trajkit {

struct RolloutResult {
  std::vector<SubMetricScores> step_scores;
  double route_completion = 0.0;
  std::size_t steps_executed = 0;
  bool collided = false;
  bool left_window = false;
};

/// Closed-loop stepping: replan, score the plan against the current world,
/// advance the ego one waypoint, propagate agents by constant velocity.
/// Terminates early on a realized collision or when a plan leaves the grid
/// window. Operates on a private copy of the scene.
template <class PlannerFn>
RolloutResult closed_loop_rollout(Scene scene, PlannerFn&& planner, std::size_t horizon_steps,
                                  const EvalParams& params = {}) {
  if (horizon_steps < 1) throw std::invalid_argument("closed_loop_rollout: horizon_steps must be >= 1");
  RolloutResult result;
  const double s_start = scene.centerline.project(scene.ego.position).s;
  const double route_remaining = std::max(1e-9, scene.centerline.length() - s_start);
  double s_now = s_start;

  for (std::size_t step = 0; step < horizon_steps; ++step) {
    Trajectory plan = planner(static_cast<const Scene&>(scene));
    if (plan.waypoints.empty()) throw std::invalid_argument("closed_loop_rollout: planner returned empty plan");
    const double dt = plan.timestep_s;

    SubMetricScores scores;
    try {
      scores = eval_submetrics(scene, plan, params);
    } catch (const std::out_of_range&) {
      result.left_window = true;
      break;
    }
    result.step_scores.push_back(scores);
    ++result.steps_executed;

    // Advance the ego along the first waypoint of the plan.
    const Vec2 new_pos = scene.to_world(plan.waypoints[0]);
    const Vec2 disp = new_pos - scene.ego.position;
    if (norm(disp) > 1e-6) scene.ego.heading = std::atan2(disp.y, disp.x);
    scene.ego.speed = norm(disp) / dt;
    scene.ego.position = new_pos;
    for (Agent& a : scene.agents) a.footprint.center += dt * a.velocity;
    scene.previous_plan = plan;

    s_now = scene.centerline.project(scene.ego.position).s;

    const OrientedBox ego_box{scene.ego.position, params.ego_length, params.ego_width, scene.ego.heading};
    for (const Agent& a : scene.agents) {
      if (obb_overlap(ego_box, a.footprint)) {
        result.collided = true;
        break;
      }
    }
    if (result.collided) break;
    if (s_now - s_start >= route_remaining - 1e-6) break;  // route finished
  }

  result.route_completion = std::clamp((s_now - s_start) / route_remaining, 0.0, 1.0);
  return result;
}

/// Constant-speed straight-ahead stub, the baseline for closed-loop
/// comparisons.
struct StraightPlanner {
  std::size_t horizon = 8;
  double timestep_s = 0.5;

  Trajectory operator()(const Scene& scene) const {
    Trajectory t;
    t.timestep_s = timestep_s;
    for (std::size_t i = 0; i < horizon; ++i)
      t.waypoints.push_back({static_cast<double>(i + 1) * timestep_s * scene.ego.speed, 0.0});
    return t;
  }
};

}  // namespace trajkit
