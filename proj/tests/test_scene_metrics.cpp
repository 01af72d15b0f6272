// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "trajkit/expert.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/rng.hpp"
#include "trajkit/rollout.hpp"
#include "trajkit/scene.hpp"

using namespace trajkit;
using Catch::Approx;

namespace {

Scene open_field_scene(double ego_speed = 8.0) {
  Scene scene;
  scene.drivable = OccupancyGrid::make(-15.0, -30.0, 140.0, 30.0, 0.5);
  std::fill(scene.drivable.drivable.begin(), scene.drivable.drivable.end(), 1);
  scene.centerline = Centerline::from_points({{0.0, 0.0}, {80.0, 0.0}});
  scene.ego.speed = ego_speed;
  scene.id = "open_field";
  return scene;
}

Trajectory straight_traj(double speed, std::size_t n = 8, double dt = 0.5) {
  Trajectory t;
  t.timestep_s = dt;
  for (std::size_t i = 0; i < n; ++i) t.waypoints.push_back({speed * dt * static_cast<double>(i + 1), 0.0});
  return t;
}

// Sampling-based collision oracle, independent of the SAT route: rasterize
// both footprints at 0.05 m and test point containment both ways.
bool dense_overlap(const OrientedBox& a, const OrientedBox& b) {
  auto sample_inside = [](const OrientedBox& src, const OrientedBox& dst) {
    const Vec2 fwd{std::cos(src.heading), std::sin(src.heading)};
    const Vec2 left{-fwd.y, fwd.x};
    for (double u = -src.length / 2; u <= src.length / 2 + 1e-9; u += 0.05)
      for (double v = -src.width / 2; v <= src.width / 2 + 1e-9; v += 0.05)
        if (dst.contains(src.center + u * fwd + v * left)) return true;
    return false;
  };
  return sample_inside(a, b) || sample_inside(b, a);
}

bool dense_nc(const Scene& scene, const Trajectory& traj, const EvalParams& params = {}) {
  std::vector<Vec2> pts{scene.ego.position};
  for (Vec2 w : traj.waypoints) pts.push_back(scene.to_world(w));
  double heading = scene.ego.heading;
  for (std::size_t t = 0; t < traj.size(); ++t) {
    const Vec2 d = pts[t + 1] - pts[t];
    if (norm(d) > 1e-6) heading = std::atan2(d.y, d.x);
    const OrientedBox ego{pts[t + 1], params.ego_length, params.ego_width, heading};
    const double time = static_cast<double>(t + 1) * traj.timestep_s;
    for (const Agent& a : scene.agents)
      if (dense_overlap(ego, a.footprint_at(time))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generate_scene is deterministic") {
  const Scene a = generate_scene(ScenarioKind::empty, 7);
  const Scene b = generate_scene(ScenarioKind::empty, 7);
  REQUIRE(scene_to_json(a).dump() == scene_to_json(b).dump());
}

TEST_CASE("lead_vehicle scenes place exactly one agent ahead on the route") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = generate_scene(ScenarioKind::lead_vehicle, seed);
    REQUIRE(s.agents.size() == 1);
    const auto proj = s.centerline.project(s.agents[0].footprint.center);
    REQUIRE(proj.s > 5.0);
    REQUIRE(std::abs(proj.lateral) < 0.5);
  }
}

TEST_CASE("generated scenes satisfy the scene invariants") {
  const ScenarioKind kinds[] = {ScenarioKind::empty, ScenarioKind::lead_vehicle, ScenarioKind::cut_in,
                                ScenarioKind::blocked_lane, ScenarioKind::intersection};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    for (ScenarioKind kind : kinds) {
      const Scene s = generate_scene(kind, seed);
      for (const Agent& a : s.agents) {
        REQUIRE(a.footprint.length > 0.0);
        REQUIRE(a.footprint.width > 0.0);
        REQUIRE(std::isfinite(a.velocity.x));
        REQUIRE(std::isfinite(a.velocity.y));
        for (Vec2 c : a.footprint.corners()) REQUIRE(s.drivable.contains(c));
      }
      for (Vec2 p : s.centerline.points) REQUIRE(s.drivable.contains(p));
      REQUIRE(std::isfinite(s.ego.speed));
    }
  }
}

TEST_CASE("scene json round trip") {
  const Scene s = generate_scene(ScenarioKind::intersection, 123);
  const Scene back = scene_from_json(scene_to_json(s));
  REQUIRE(scene_to_json(back).dump() == scene_to_json(s).dump());
}

TEST_CASE("unobstructed centerline driving scores 1 on every flag metric") {
  const Scene scene = open_field_scene(8.0);
  const Trajectory traj = straight_traj(8.0);
  const SubMetricScores s = eval_submetrics(scene, traj);
  REQUIRE(s.nc == 1.0);
  REQUIRE(s.dac == 1.0);
  REQUIRE(s.ddc == 1.0);
  REQUIRE(s.tlc == 1.0);
  REQUIRE(s.ttc == 1.0);
  REQUIRE(s.comfort == 1.0);
  REQUIRE(s.lk == 1.0);
  REQUIRE(s.hc == 1.0);
  REQUIRE(s.ec == 1.0);
  REQUIRE(s.ep == Approx(1.0));  // progress equals the constant-speed reference
}

TEST_CASE("waypoint inside a static agent footprint forces nc = 0") {
  Scene scene = open_field_scene();
  Agent block;
  block.footprint = {{16.0, 0.0}, 4.6, 1.8, 0.0};
  block.velocity = {0.0, 0.0};
  scene.agents.push_back(block);
  const Trajectory traj = straight_traj(8.0);  // waypoint 3 is at x = 16
  REQUIRE(eval_submetrics(scene, traj).nc == 0.0);
}

TEST_CASE("eval_submetrics is deterministic") {
  const Scene scene = generate_scene(ScenarioKind::cut_in, 5);
  const Trajectory traj = expert_plan(scene);
  const SubMetricScores a = eval_submetrics(scene, traj);
  const SubMetricScores b = eval_submetrics(scene, traj);
  for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) REQUIRE(a.get(m) == b.get(m));
}

TEST_CASE("trajectory outside the grid window raises") {
  const Scene scene = open_field_scene();
  Trajectory out = straight_traj(8.0);
  out.waypoints.back().x = 500.0;
  REQUIRE_THROWS_AS(eval_submetrics(scene, out), std::out_of_range);
}

TEST_CASE("nc agrees with the dense-sampling oracle on a randomized corpus") {
  const ScenarioKind kinds[] = {ScenarioKind::empty, ScenarioKind::lead_vehicle, ScenarioKind::cut_in,
                                ScenarioKind::blocked_lane, ScenarioKind::intersection};
  Rng rng(2024);
  int disagreements = 0;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    for (ScenarioKind kind : kinds) {
      const Scene scene = generate_scene(kind, seed);
      std::vector<Trajectory> trials;
      trials.push_back(expert_plan(scene));
      trials.push_back(straight_traj(scene.ego.speed));
      trials.push_back(perturb_gaussian(straight_traj(scene.ego.speed), 0.4, rng.next_u64()));
      for (const Trajectory& traj : trials) {
        SubMetricScores s;
        try {
          s = eval_submetrics(scene, traj);
        } catch (const std::out_of_range&) {
          continue;
        }
        ++checked;
        const bool oracle = dense_nc(scene, traj);
        if ((s.nc == 1.0) != oracle) ++disagreements;
      }
    }
  }
  REQUIRE(checked > 400);
  REQUIRE(disagreements == 0);
}

TEST_CASE("all-stop trajectory in free space never collides") {
  const ScenarioKind kinds[] = {ScenarioKind::lead_vehicle, ScenarioKind::cut_in, ScenarioKind::blocked_lane,
                                ScenarioKind::intersection};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (ScenarioKind kind : kinds) {
      const Scene scene = generate_scene(kind, seed);
      Trajectory stop;
      stop.timestep_s = 0.5;
      stop.waypoints.assign(8, Vec2{0.0, 0.0});
      REQUIRE(eval_submetrics(scene, stop).nc == 1.0);
    }
  }
}

TEST_CASE("aggregate_pdms trivial and hand-computed cases") {
  const MetricWeights weights;
  SubMetricScores ones;
  REQUIRE(aggregate_pdms(ones, weights, PdmsVersion::v1) == Approx(1.0));
  REQUIRE(aggregate_pdms(ones, weights, PdmsVersion::v2) == Approx(1.0));

  SubMetricScores crash = ones;
  crash.nc = 0.0;
  REQUIRE(aggregate_pdms(crash, weights, PdmsVersion::v1) == 0.0);
  REQUIRE(aggregate_pdms(crash, weights, PdmsVersion::v2) == 0.0);

  // v1, pen (1,1), avg EP=0.8 (w5), TTC=1 (w5), C=1 (w2) -> 11/12.
  SubMetricScores s = ones;
  s.ep = 0.8;
  REQUIRE(aggregate_pdms(s, weights, PdmsVersion::v1) == Approx(11.0 / 12.0).margin(1e-12));
}

TEST_CASE("aggregate_pdms is monotone in every sub-metric") {
  const MetricWeights weights;
  Rng rng(8);
  for (int iter = 0; iter < 400; ++iter) {
    SubMetricScores s;
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) s.set(m, rng.next_double());
    for (PdmsVersion ver : {PdmsVersion::v1, PdmsVersion::v2}) {
      const double base = aggregate_pdms(s, weights, ver);
      REQUIRE(base >= 0.0);
      REQUIRE(base <= 1.0);
      const std::size_t bump = rng.uniform_index(SubMetricScores::kCount);
      SubMetricScores up = s;
      up.set(bump, std::min(1.0, s.get(bump) + rng.next_double() * (1.0 - s.get(bump))));
      REQUIRE(aggregate_pdms(up, weights, ver) >= base - 1e-12);
    }
  }
}

TEST_CASE("hd_score trivial cases and linearity in route completion") {
  std::vector<SubMetricScores> steps(4);
  REQUIRE(hd_score(steps, 0.5) == Approx(0.5));
  REQUIRE(hd_score(steps, 1.0) == Approx(1.0));

  std::vector<SubMetricScores> half(2);
  half[0].comfort = 0.0;
  half[1].comfort = 0.0;
  REQUIRE(hd_score(half, 1.0) == Approx(0.5));  // equal weights over {ttc, comfort}

  Rng rng(17);
  std::vector<SubMetricScores> random_steps(5);
  for (auto& s : random_steps)
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) s.set(m, rng.next_double());
  const double at1 = hd_score(random_steps, 1.0);
  REQUIRE(hd_score(random_steps, 0.25) == Approx(0.25 * at1).margin(1e-15));

  REQUIRE_THROWS_AS(hd_score({}, 1.0), std::invalid_argument);
}

TEST_CASE("closed loop: straight stub completes an empty straight road") {
  Scene scene = open_field_scene(8.0);
  scene.centerline = Centerline::from_points({{0.0, 0.0}, {60.0, 0.0}});
  const RolloutResult r = closed_loop_rollout(scene, StraightPlanner{}, 20);
  REQUIRE(r.route_completion == Approx(1.0));
  REQUIRE_FALSE(r.collided);
  for (const auto& s : r.step_scores) REQUIRE(s.nc == 1.0);
}

TEST_CASE("closed loop: blocking agent terminates the straight stub early") {
  Scene scene = open_field_scene(8.0);
  scene.centerline = Centerline::from_points({{0.0, 0.0}, {60.0, 0.0}});
  Agent block;
  block.footprint = {{25.0, 0.0}, 4.6, 1.8, 0.0};
  block.velocity = {0.0, 0.0};
  scene.agents.push_back(block);
  const RolloutResult r = closed_loop_rollout(scene, StraightPlanner{}, 20);
  REQUIRE(r.collided);
  REQUIRE(r.route_completion < 1.0);
}

TEST_CASE("expert trajectories are collision-free on their own scenes") {
  const ScenarioKind kinds[] = {ScenarioKind::empty, ScenarioKind::lead_vehicle, ScenarioKind::cut_in,
                                ScenarioKind::blocked_lane, ScenarioKind::intersection};
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    for (ScenarioKind kind : kinds) {
      const Scene scene = generate_scene(kind, seed);
      const Trajectory expert = expert_plan(scene);
      const SubMetricScores s = eval_submetrics(scene, expert);
      INFO("kind=" << to_string(kind) << " seed=" << seed);
      REQUIRE(s.nc == 1.0);
    }
  }
}

TEST_CASE("previous-plan consistency defaults to 1 and trips on jumps") {
  Scene scene = open_field_scene(8.0);
  const Trajectory smooth = straight_traj(8.0);
  REQUIRE(eval_submetrics(scene, smooth).ec == 1.0);

  scene.previous_plan = smooth;
  REQUIRE(eval_submetrics(scene, smooth).ec == 1.0);

  // A hard-braking replan right after a constant-speed plan differs by more
  // than the threshold in acceleration magnitude.
  Trajectory brake;
  brake.timestep_s = 0.5;
  double v = 8.0, x = 0.0;
  for (int i = 0; i < 8; ++i) {
    v = std::max(0.0, v - 4.0 * 0.5);
    x += v * 0.5;
    brake.waypoints.push_back({x, 0.0});
  }
  REQUIRE(eval_submetrics(scene, brake).ec == 0.0);
}
