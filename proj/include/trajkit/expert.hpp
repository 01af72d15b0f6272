// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "trajkit/geometry.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/scene.hpp"

namespace trajkit {

/// Privileged centerline-following planner with agent-aware speed control.
/// Serves as the demonstration source for training corpora: it sees the full
/// scene state and searches a small family of speed profiles along the route,
/// keeping the fastest one the metric oracle accepts.
inline Trajectory expert_plan(const Scene& scene, std::size_t horizon = 8, double dt = 0.5,
                              const EvalParams& params = {}) {
  const double s0 = scene.centerline.project(scene.ego.position).s;
  const double v0 = scene.ego.speed;

  auto profile_to_trajectory = [&](double accel, double v_cap) {
    Trajectory traj;
    traj.timestep_s = dt;
    double v = v0;
    double s = s0;
    for (std::size_t i = 0; i < horizon; ++i) {
      const double v_next = std::clamp(v + accel * dt, 0.0, v_cap);
      s += 0.5 * (v + v_next) * dt;
      v = v_next;
      traj.waypoints.push_back(scene.to_ego(scene.centerline.point_at(s)));
    }
    return traj;
  };

  const double v_cap = v0 + 2.0;
  std::vector<Trajectory> candidates;
  for (double a : {1.0, 0.5, 0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -3.0})
    candidates.push_back(profile_to_trajectory(a, v_cap));

  if (scene.signal && scene.signal->state == SignalState::red) {
    const double gap = scene.signal->stop_s - s0 - 2.0;
    if (gap > 0.5 && v0 > 0.1) {
      const double brake = std::clamp(v0 * v0 / (2.0 * gap), 0.0, 3.5);
      candidates.push_back(profile_to_trajectory(-brake, v_cap));
    }
  }

  auto progress_of = [&](const Trajectory& t) {
    return t.waypoints.empty() ? 0.0 : scene.centerline.project(scene.to_world(t.waypoints.back())).s;
  };

  // Two acceptance tiers: full compliance first, then collision-safety only.
  const Trajectory* best = nullptr;
  double best_progress = -1.0;
  for (int tier = 0; tier < 2 && best == nullptr; ++tier) {
    for (const Trajectory& cand : candidates) {
      SubMetricScores s;
      try {
        s = eval_submetrics(scene, cand, params);
      } catch (const std::out_of_range&) {
        continue;
      }
      const bool ok = tier == 0 ? (s.nc == 1.0 && s.ttc == 1.0 && s.tlc == 1.0 && s.comfort == 1.0 && s.dac == 1.0)
                                : (s.nc == 1.0 && s.tlc == 1.0);
      if (!ok) continue;
      const double p = progress_of(cand);
      if (p > best_progress) {
        best_progress = p;
        best = &cand;
      }
    }
    if (best) return *best;
  }
  // Last resort: hardest stop in the family.
  return candidates[8];
}

}  // namespace trajkit
