// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

#include "trajkit/geometry.hpp"
#include "trajkit/rng.hpp"

using namespace trajkit;
using Catch::Approx;

namespace {

Trajectory make_traj(std::initializer_list<Vec2> pts, double dt = 0.5) {
  Trajectory t;
  t.timestep_s = dt;
  t.waypoints.assign(pts);
  return t;
}

Trajectory random_traj(Rng& rng, std::size_t n = 8, double span = 30.0) {
  Trajectory t;
  t.timestep_s = 0.5;
  for (std::size_t i = 0; i < n; ++i) t.waypoints.push_back({rng.uniform(-span, span), rng.uniform(-span, span)});
  return t;
}

// Smooth reference arc used where the tests need a structured source.
Trajectory smooth_arc(double speed = 8.0, double curvature = 0.02, std::size_t n = 8) {
  Trajectory t;
  t.timestep_s = 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = speed * 0.5 * static_cast<double>(i + 1);
    t.waypoints.push_back({std::sin(curvature * s) / curvature, (1.0 - std::cos(curvature * s)) / curvature});
  }
  return t;
}

}  // namespace

TEST_CASE("to_polar on unit axes and the 3-4-5 triangle") {
  const auto p = to_polar(make_traj({{1, 0}, {0, 1}}));
  REQUIRE(p.points[0].rho == Approx(1.0));
  REQUIRE(p.points[0].theta == Approx(0.0).margin(1e-15));
  REQUIRE(p.points[1].rho == Approx(1.0));
  REQUIRE(p.points[1].theta == Approx(std::numbers::pi / 2));

  const auto q = to_polar(make_traj({{0, 0}, {3, 4}}));
  REQUIRE(q.points[0].rho == 0.0);
  REQUIRE(q.points[0].theta == 0.0);  // origin convention
  REQUIRE(q.points[1].rho == Approx(5.0));
  REQUIRE(q.points[1].theta == Approx(std::atan2(4.0, 3.0)));
}

TEST_CASE("from_polar basics") {
  const PolarTrajectory one{{{1.0, 0.0}}, 0.5};
  REQUIRE(from_polar(one).waypoints[0].x == Approx(1.0));
  REQUIRE(from_polar(one).waypoints[0].y == Approx(0.0).margin(1e-15));

  const PolarTrajectory two{{{2.0, std::numbers::pi}}, 0.5};
  REQUIRE(from_polar(two).waypoints[0].x == Approx(-2.0).margin(1e-12));
  REQUIRE(from_polar(two).waypoints[0].y == Approx(0.0).margin(1e-12));
}

TEST_CASE("polar round-trip reproduces random trajectories within 1e-9") {
  Rng rng(42);
  for (int iter = 0; iter < 100; ++iter) {
    const Trajectory t = random_traj(rng);
    const Trajectory back = from_polar(to_polar(t));
    for (std::size_t i = 0; i < t.size(); ++i) {
      REQUIRE(back.waypoints[i].x == Approx(t.waypoints[i].x).margin(1e-9));
      REQUIRE(back.waypoints[i].y == Approx(t.waypoints[i].y).margin(1e-9));
    }
  }
}

TEST_CASE("to_polar rejects non-finite input") {
  Trajectory bad = make_traj({{1, 0}, {std::numeric_limits<double>::quiet_NaN(), 0}});
  REQUIRE_THROWS_AS(to_polar(bad), std::invalid_argument);
}

TEST_CASE("expand_polar identity coefficients reproduce the input exactly") {
  ExpansionConfig cfg;
  cfg.radial_coeffs = {1.0};
  cfg.angular_coeffs = {0.0};
  Rng rng(7);
  const Trajectory t = random_traj(rng);
  const auto out = expand_polar(t, cfg);
  REQUIRE(out.size() == 1);
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(out[0].waypoints[i].x == t.waypoints[i].x);  // exact
    REQUIRE(out[0].waypoints[i].y == t.waypoints[i].y);
  }
}

TEST_CASE("expand_polar analytic rotation and scale") {
  ExpansionConfig cfg;
  cfg.radial_coeffs = {2.0};
  cfg.angular_coeffs = {std::numbers::pi / 2};
  const auto out = expand_polar(make_traj({{1, 0}}), cfg);
  REQUIRE(out.size() == 1);
  REQUIRE(out[0].waypoints[0].x == Approx(0.0).margin(1e-12));
  REQUIRE(out[0].waypoints[0].y == Approx(2.0).margin(1e-12));
}

TEST_CASE("expand_polar variants are similarity transforms of the source") {
  const auto cfg = ExpansionConfig::defaults();
  Rng rng(11);
  for (int iter = 0; iter < 20; ++iter) {
    const Trajectory t = random_traj(rng);
    const auto variants = expand_polar(t, cfg);
    REQUIRE(variants.size() == 25);
    std::size_t v = 0;
    for (double lambda : cfg.radial_coeffs) {
      for (std::size_t dv = 0; dv < cfg.angular_coeffs.size(); ++dv, ++v) {
        // All pairwise waypoint distances scale by exactly lambda.
        for (std::size_t i = 0; i < t.size(); ++i) {
          for (std::size_t j = i + 1; j < t.size(); ++j) {
            const double src = norm(t.waypoints[i] - t.waypoints[j]);
            const double got = norm(variants[v].waypoints[i] - variants[v].waypoints[j]);
            REQUIRE(got == Approx(lambda * src).margin(1e-9));
          }
        }
        // Discrete turning angles are invariant.
        const auto src_angles = turning_angles(t);
        const auto var_angles = turning_angles(variants[v]);
        REQUIRE(src_angles.size() == var_angles.size());
        for (std::size_t a = 0; a < src_angles.size(); ++a)
          REQUIRE(var_angles[a] == Approx(src_angles[a]).margin(1e-9));
      }
    }
  }
}

TEST_CASE("expand_xy identity and pure x-scale") {
  ExpansionConfig identity;
  identity.radial_coeffs = {1.0};
  identity.angular_coeffs = {0.0};
  const Trajectory t = make_traj({{1, 1}, {2, -0.5}});
  const auto same = expand_xy(t, identity);
  REQUIRE(same[0].waypoints[0].x == t.waypoints[0].x);
  REQUIRE(same[0].waypoints[1].y == t.waypoints[1].y);

  ExpansionConfig xscale;
  xscale.radial_coeffs = {2.0};
  xscale.angular_coeffs = {0.0};
  const auto out = expand_xy(make_traj({{1, 1}}), xscale);
  REQUIRE(out[0].waypoints[0].x == Approx(2.0));
  REQUIRE(out[0].waypoints[0].y == Approx(1.0));
}

TEST_CASE("expand_xy barely explores laterally on a near-straight trajectory") {
  // Near-straight source: |y| <= 0.1 m over a 30+ m range.
  Trajectory straight;
  straight.timestep_s = 0.5;
  for (std::size_t i = 0; i < 8; ++i)
    straight.waypoints.push_back({4.0 * static_cast<double>(i + 1), 0.1 * std::sin(0.3 * static_cast<double>(i))});

  const auto cfg = ExpansionConfig::defaults();
  const auto xy = expand_xy(straight, cfg);
  const auto polar = expand_polar(straight, cfg);

  auto y_spread = [](const std::vector<Trajectory>& set) {
    double lo = 1e300, hi = -1e300;
    for (const auto& t : set) {
      for (const Vec2& w : t.waypoints) {
        lo = std::min(lo, w.y);
        hi = std::max(hi, w.y);
      }
    }
    return hi - lo;
  };
  auto endpoint_spread = [](const std::vector<Trajectory>& set) {
    double lo = 1e300, hi = -1e300;
    for (const auto& t : set) {
      lo = std::min(lo, t.waypoints.back().y);
      hi = std::max(hi, t.waypoints.back().y);
    }
    return hi - lo;
  };

  REQUIRE(y_spread(xy) < 0.15);
  REQUIRE(endpoint_spread(polar) > 1.0);  // +-6 deg at 32 m range
}

TEST_CASE("perturb_gaussian: zero sigma, determinism, structure damage") {
  const Trajectory t = smooth_arc();
  const Trajectory same = perturb_gaussian(t, 0.0, 9);
  for (std::size_t i = 0; i < t.size(); ++i) REQUIRE(same.waypoints[i].x == t.waypoints[i].x);

  const Trajectory a = perturb_gaussian(t, 0.5, 1234);
  const Trajectory b = perturb_gaussian(t, 0.5, 1234);
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(a.waypoints[i].x == b.waypoints[i].x);
    REQUIRE(a.waypoints[i].y == b.waypoints[i].y);
  }

  // Monte-Carlo: mean second-difference magnitude strictly exceeds the
  // unperturbed trajectory's.
  const double base = mean_second_difference(t);
  double acc = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) acc += mean_second_difference(perturb_gaussian(t, 0.5, s));
  REQUIRE(acc / 1000.0 > base);
}

TEST_CASE("forward_diffuse endpoints and injected noise") {
  DiffusionSchedule sched;
  sched.alpha_bar = {1.0, 0.25};
  const Trajectory t = smooth_arc();

  const Trajectory keep = forward_diffuse(t, sched, 1, 77);
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(keep.waypoints[i].x == t.waypoints[i].x);  // alpha_bar = 1: exact
    REQUIRE(keep.waypoints[i].y == t.waypoints[i].y);
  }

  const Trajectory half = forward_diffuse_with(t, sched, 2, [] { return 0.0; });
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(half.waypoints[i].x == Approx(0.5 * t.waypoints[i].x));
    REQUIRE(half.waypoints[i].y == Approx(0.5 * t.waypoints[i].y));
  }

  REQUIRE_THROWS_AS(forward_diffuse(t, sched, 3, 0), std::out_of_range);
  REQUIRE_THROWS_AS(forward_diffuse(t, sched, 0, 0), std::out_of_range);
}

TEST_CASE("forward_diffuse empirical variance matches 1 - alpha_bar") {
  DiffusionSchedule sched;
  sched.alpha_bar = {1.0, 0.5};
  const Trajectory t = make_traj({{3, -2}, {5, 1}});
  const double expected_var = 0.5;

  double mean_x = 0.0, m2_x = 0.0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    const Trajectory d = forward_diffuse(t, sched, 2, static_cast<std::uint64_t>(s));
    const double x = d.waypoints[0].x;
    const double delta = x - mean_x;
    mean_x += delta / (s + 1);
    m2_x += delta * (x - mean_x);
  }
  const double var = m2_x / (n - 1);
  REQUIRE(var == Approx(expected_var).epsilon(0.05));
}

TEST_CASE("forward_diffuse deterministic part is linear in the trajectory") {
  DiffusionSchedule sched;
  sched.alpha_bar = {1.0, 0.36};
  const Trajectory t = smooth_arc();
  Trajectory scaled = t;
  for (Vec2& w : scaled.waypoints) w = 3.0 * w;
  const auto f_t = forward_diffuse_with(t, sched, 2, [] { return 0.0; });
  const auto f_scaled = forward_diffuse_with(scaled, sched, 2, [] { return 0.0; });
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(f_scaled.waypoints[i].x == Approx(3.0 * f_t.waypoints[i].x));
    REQUIRE(f_scaled.waypoints[i].y == Approx(3.0 * f_t.waypoints[i].y));
  }
}

TEST_CASE("trajectory_distance is a metric") {
  const Trajectory a = make_traj({{0, 0}, {1, 0}});
  const Trajectory b = make_traj({{0, 1}, {1, 1}});
  REQUIRE(trajectory_distance(a, a) == 0.0);
  REQUIRE(trajectory_distance(a, b) == Approx(1.0));

  Trajectory short_traj = make_traj({{0, 0}});
  REQUIRE_THROWS_AS(trajectory_distance(a, short_traj), std::invalid_argument);

  Rng rng(5);
  for (int iter = 0; iter < 1000; ++iter) {
    const Trajectory x = random_traj(rng, 6);
    const Trajectory y = random_traj(rng, 6);
    const Trajectory z = random_traj(rng, 6);
    const double xy = trajectory_distance(x, y);
    const double yx = trajectory_distance(y, x);
    REQUIRE(xy == yx);
    REQUIRE(trajectory_distance(x, z) <= xy + trajectory_distance(y, z) + 1e-12);
  }
}

TEST_CASE("trajectory csv round trip") {
  const Trajectory t = smooth_arc();
  std::stringstream ss;
  write_trajectory_csv(ss, t);
  const Trajectory back = read_trajectory_csv(ss);
  REQUIRE(back.timestep_s == t.timestep_s);
  REQUIRE(back.size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    REQUIRE(back.waypoints[i].x == t.waypoints[i].x);
    REQUIRE(back.waypoints[i].y == t.waypoints[i].y);
  }
}

TEST_CASE("diffusion schedule validation") {
  REQUIRE_NOTHROW(DiffusionSchedule::linear().validate());
  DiffusionSchedule bad;
  bad.alpha_bar = {0.5, 0.9};
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
