// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajkit/rng.hpp"

namespace trajkit {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }
  friend Vec2 operator*(Vec2 v, double s) { return {s * v.x, s * v.y}; }
  Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 v) { return std::sqrt(v.x * v.x + v.y * v.y); }
inline double squared_norm(Vec2 v) { return v.x * v.x + v.y * v.y; }
inline Vec2 rotated(Vec2 v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}
inline bool is_finite(Vec2 v) { return std::isfinite(v.x) && std::isfinite(v.y); }

/// Planar waypoint sequence in the ego frame (x forward, y left), with a
/// fixed time spacing between consecutive waypoints. The universal currency
/// passed between every module.
struct Trajectory {
  std::vector<Vec2> waypoints;
  double timestep_s = 0.5;

  std::size_t size() const { return waypoints.size(); }
  double horizon_s() const { return static_cast<double>(waypoints.size()) * timestep_s; }
};

struct PolarPoint {
  double rho = 0.0;    // meters, >= 0
  double theta = 0.0;  // radians in (-pi, pi]
};

/// Polar-domain view of a trajectory; radius/angle measured from the ego
/// origin per waypoint.
struct PolarTrajectory {
  std::vector<PolarPoint> points;
  double timestep_s = 0.5;
};

/// Coefficient grid for trajectory expansion: every (radial scale, angular
/// offset) pair produces one variant, so a config with n coefficients per
/// axis yields n*n trajectories.
struct ExpansionConfig {
  std::vector<double> radial_coeffs;
  std::vector<double> angular_coeffs;

  static ExpansionConfig defaults() {
    constexpr double deg = std::numbers::pi / 180.0;
    ExpansionConfig cfg;
    cfg.radial_coeffs = {0.92, 0.96, 1.0, 1.04, 1.08};
    cfg.angular_coeffs = {-6.0 * deg, -3.0 * deg, 0.0, 3.0 * deg, 6.0 * deg};
    return cfg;
  }

  // Symmetric grid with the given per-axis count, same spread as defaults().
  static ExpansionConfig grid(std::size_t per_axis, double radial_halfwidth = 0.08,
                              double angular_halfwidth = 6.0 * std::numbers::pi / 180.0) {
    ExpansionConfig cfg;
    cfg.radial_coeffs.resize(per_axis);
    cfg.angular_coeffs.resize(per_axis);
    for (std::size_t i = 0; i < per_axis; ++i) {
      const double t = per_axis == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(per_axis - 1);
      cfg.radial_coeffs[i] = 1.0 - radial_halfwidth + 2.0 * radial_halfwidth * t;
      cfg.angular_coeffs[i] = -angular_halfwidth + 2.0 * angular_halfwidth * t;
    }
    return cfg;
  }

  std::size_t per_axis_count() const { return radial_coeffs.size(); }
  std::size_t variant_count() const { return radial_coeffs.size() * angular_coeffs.size(); }

  void validate() const {
    if (radial_coeffs.empty() || radial_coeffs.size() != angular_coeffs.size())
      throw std::invalid_argument("expansion config: coefficient sequences must be non-empty and equal length");
    for (double l : radial_coeffs)
      if (!(l > 0.0) || !std::isfinite(l))
        throw std::invalid_argument("expansion config: radial coefficients must be positive finite");
    for (double d : angular_coeffs)
      if (!std::isfinite(d)) throw std::invalid_argument("expansion config: angular coefficients must be finite");
  }
};

/// Truncated cumulative noise schedule: alpha_bar[i] in (0,1], strictly
/// decreasing, indexed 1..steps() in the public API.
struct DiffusionSchedule {
  std::vector<double> alpha_bar;

  // Truncated regime: even the last usable step keeps the noised sample
  // close to its source.
  static DiffusionSchedule linear(std::size_t steps = 8, double first = 1.0, double last = 0.99) {
    DiffusionSchedule s;
    s.alpha_bar.resize(steps);
    for (std::size_t i = 0; i < steps; ++i) {
      const double t = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      s.alpha_bar[i] = first + (last - first) * t;
    }
    return s;
  }

  std::size_t steps() const { return alpha_bar.size(); }

  double alpha_bar_at(std::size_t step) const {  // 1-based
    if (step < 1 || step > alpha_bar.size())
      throw std::out_of_range("diffusion step index out of range");
    return alpha_bar[step - 1];
  }

  void validate() const {
    if (alpha_bar.empty()) throw std::invalid_argument("diffusion schedule: empty");
    double prev = 1.0 + 1e-12;
    for (double a : alpha_bar) {
      if (!(a > 0.0) || a > 1.0) throw std::invalid_argument("diffusion schedule: alpha_bar must lie in (0,1]");
      if (!(a < prev)) throw std::invalid_argument("diffusion schedule: alpha_bar must be strictly decreasing");
      prev = a;
    }
  }
};

inline void validate_trajectory(const Trajectory& traj) {
  if (traj.waypoints.empty()) throw std::invalid_argument("trajectory: empty waypoint list");
  if (!(traj.timestep_s > 0.0)) throw std::invalid_argument("trajectory: timestep must be positive");
  for (Vec2 w : traj.waypoints)
    if (!is_finite(w)) throw std::invalid_argument("trajectory: non-finite coordinate");
}

/// Cartesian -> polar per waypoint. Waypoints at the exact origin get
/// theta = 0 (rho is 0 there, so the angle carries no information).
inline PolarTrajectory to_polar(const Trajectory& traj) {
  validate_trajectory(traj);
  PolarTrajectory out;
  out.timestep_s = traj.timestep_s;
  out.points.reserve(traj.waypoints.size());
  for (Vec2 w : traj.waypoints) {
    PolarPoint p;
    p.rho = std::hypot(w.x, w.y);
    p.theta = (w.x == 0.0 && w.y == 0.0) ? 0.0 : std::atan2(w.y, w.x);
    out.points.push_back(p);
  }
  return out;
}

inline Trajectory from_polar(const PolarTrajectory& ptraj) {
  Trajectory out;
  out.timestep_s = ptraj.timestep_s;
  out.waypoints.reserve(ptraj.points.size());
  for (PolarPoint p : ptraj.points) {
    if (!std::isfinite(p.rho) || !std::isfinite(p.theta))
      throw std::invalid_argument("polar trajectory: non-finite coordinate");
    out.waypoints.push_back({p.rho * std::cos(p.theta), p.rho * std::sin(p.theta)});
  }
  return out;
}

/// Structure-preserved expansion: scale every radius by one radial
/// coefficient and shift every angle by one angular coefficient, for each
/// (u, v) pair in row-major order over (radial, angular). The polar map
/// (rho, theta) -> (lambda rho, theta + delta) is the rotation-scaling
/// lambda * R(delta), which is how it is applied here: waypoints at the
/// origin stay put, identity coefficients reproduce the input exactly, and
/// each variant is a similarity transform of the source.
inline std::vector<Trajectory> expand_polar(const Trajectory& traj, const ExpansionConfig& cfg) {
  cfg.validate();
  validate_trajectory(traj);
  std::vector<Trajectory> out;
  out.reserve(cfg.variant_count());
  for (double lambda : cfg.radial_coeffs) {
    for (double delta : cfg.angular_coeffs) {
      const double c = std::cos(delta), s = std::sin(delta);
      Trajectory variant;
      variant.timestep_s = traj.timestep_s;
      variant.waypoints.reserve(traj.waypoints.size());
      for (Vec2 w : traj.waypoints)
        variant.waypoints.push_back({lambda * (c * w.x - s * w.y), lambda * (s * w.x + c * w.y)});
      out.push_back(std::move(variant));
    }
  }
  return out;
}

/// Cartesian-space expansion baseline: variant (u, v) scales x by the radial
/// coefficient and y by (1 + tan(angular coefficient)). Axis-aligned spread
/// only; when |y| is small the lateral exploration collapses with it.
inline std::vector<Trajectory> expand_xy(const Trajectory& traj, const ExpansionConfig& cfg) {
  cfg.validate();
  validate_trajectory(traj);
  std::vector<Trajectory> out;
  out.reserve(cfg.variant_count());
  for (double lambda : cfg.radial_coeffs) {
    for (double delta : cfg.angular_coeffs) {
      const double y_scale = 1.0 + std::tan(delta);
      Trajectory variant;
      variant.timestep_s = traj.timestep_s;
      variant.waypoints.reserve(traj.waypoints.size());
      for (Vec2 w : traj.waypoints) variant.waypoints.push_back({lambda * w.x, y_scale * w.y});
      out.push_back(std::move(variant));
    }
  }
  return out;
}

/// I.i.d. zero-mean Gaussian jitter on every coordinate, reproducible from
/// the seed. The unstructured baseline; it damages second differences.
inline Trajectory perturb_gaussian(const Trajectory& traj, double sigma, std::uint64_t seed) {
  validate_trajectory(traj);
  if (!(sigma >= 0.0)) throw std::invalid_argument("perturb_gaussian: sigma must be >= 0");
  Trajectory out = traj;
  if (sigma == 0.0) return out;
  Rng rng(seed);
  for (Vec2& w : out.waypoints) {
    w.x += rng.normal(0.0, sigma);
    w.y += rng.normal(0.0, sigma);
  }
  return out;
}

/// Forward noising at schedule step (1-based):
/// sqrt(alpha_bar) * traj + sqrt(1 - alpha_bar) * eps, eps from `noise`.
template <class NoiseFn>
Trajectory forward_diffuse_with(const Trajectory& traj, const DiffusionSchedule& sched, std::size_t step,
                                NoiseFn&& noise) {
  validate_trajectory(traj);
  const double alpha = sched.alpha_bar_at(step);
  const double signal = std::sqrt(alpha);
  const double spread = std::sqrt(1.0 - alpha);
  Trajectory out;
  out.timestep_s = traj.timestep_s;
  out.waypoints.reserve(traj.waypoints.size());
  for (Vec2 w : traj.waypoints) {
    const double ex = noise();
    const double ey = noise();
    out.waypoints.push_back({signal * w.x + spread * ex, signal * w.y + spread * ey});
  }
  return out;
}

inline Trajectory forward_diffuse(const Trajectory& traj, const DiffusionSchedule& sched, std::size_t step,
                                  std::uint64_t seed) {
  Rng rng(seed);
  return forward_diffuse_with(traj, sched, step, [&rng] { return rng.normal(); });
}

/// Mean Euclidean distance over corresponding waypoints. A metric on
/// fixed-length trajectories.
inline double trajectory_distance(const Trajectory& a, const Trajectory& b) {
  if (a.waypoints.size() != b.waypoints.size())
    throw std::invalid_argument("trajectory_distance: waypoint count mismatch");
  if (a.waypoints.empty()) throw std::invalid_argument("trajectory_distance: empty trajectories");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.waypoints.size(); ++i) sum += norm(a.waypoints[i] - b.waypoints[i]);
  return sum / static_cast<double>(a.waypoints.size());
}

/// Angles between consecutive segments; zero-length segments are skipped.
inline std::vector<double> turning_angles(const Trajectory& traj) {
  std::vector<double> out;
  const auto& w = traj.waypoints;
  for (std::size_t i = 0; i + 2 < w.size(); ++i) {
    const Vec2 a = w[i + 1] - w[i];
    const Vec2 b = w[i + 2] - w[i + 1];
    const double na = norm(a), nb = norm(b);
    if (na < 1e-12 || nb < 1e-12) continue;
    out.push_back(std::atan2(cross(a, b), dot(a, b)));
  }
  return out;
}

/// Mean magnitude of discrete second differences of the waypoints, the
/// roughness proxy used to compare expansion schemes.
inline double mean_second_difference(const Trajectory& traj) {
  const auto& w = traj.waypoints;
  if (w.size() < 3) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i + 2 < w.size(); ++i) sum += norm(w[i + 2] - 2.0 * w[i + 1] + w[i]);
  return sum / static_cast<double>(w.size() - 2);
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  os << "t,x,y\n";
  char buf[96];
  for (std::size_t i = 0; i < traj.waypoints.size(); ++i) {
    const double t = static_cast<double>(i + 1) * traj.timestep_s;
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", t, traj.waypoints[i].x, traj.waypoints[i].y);
    os << buf;
  }
}

inline Trajectory read_trajectory_csv(std::istream& is) {
  Trajectory traj;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("trajectory csv: empty stream");
  std::vector<double> times;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    double vals[3];
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(row, cell, ',')) throw std::runtime_error("trajectory csv: malformed row");
      vals[i] = std::stod(cell);
    }
    times.push_back(vals[0]);
    traj.waypoints.push_back({vals[1], vals[2]});
  }
  if (traj.waypoints.empty()) throw std::runtime_error("trajectory csv: no waypoints");
  traj.timestep_s = times.front();
  validate_trajectory(traj);
  return traj;
}

}  // namespace trajkit
