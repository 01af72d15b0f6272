// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajkit/binio.hpp"
#include "trajkit/geometry.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/reward_cache.hpp"
#include "trajkit/rng.hpp"
#include "trajkit/scene.hpp"

namespace trajkit {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Scene features
// ---------------------------------------------------------------------------

/// Ground-truth scene summary consumed by both decoder stages. Fixed layout:
///   [0]      ego speed / 10
///   [1]      red-signal flag
///   [2]      stop-line distance / 50 (2.0 when no signal)
///   [3..18]  four nearest agents x (dx/20, dy/20, dvx/10, dvy/10),
///            absent slots hold the sentinel (5, 0, 0, 0)
///   [19..22] route tangent heading relative to ego at s+{5,10,20,30}
///   [23..26] ego-frame lateral offset of the route at those lookaheads / 10
///   [27..32] drivable clearance left/right at s+{5,15,30} / 5 (cap 5 m)
struct SceneFeatures {
  static constexpr std::size_t kDim = 33;
  std::array<double, kDim> v{};
};

inline SceneFeatures encode_scene(const Scene& scene) {
  SceneFeatures f;
  f.v[0] = scene.ego.speed / 10.0;

  const double s_ego = scene.centerline.project(scene.ego.position).s;
  if (scene.signal && scene.signal->state == SignalState::red) {
    f.v[1] = 1.0;
    f.v[2] = std::clamp((scene.signal->stop_s - s_ego) / 50.0, -1.0, 2.0);
  } else {
    f.v[1] = 0.0;
    f.v[2] = 2.0;
  }

  // Nearest agents, closest first.
  std::vector<std::size_t> order(scene.agents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double da = squared_norm(scene.agents[a].footprint.center - scene.ego.position);
    const double db = squared_norm(scene.agents[b].footprint.center - scene.ego.position);
    return da < db || (da == db && a < b);
  });
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const std::size_t base = 3 + 4 * slot;
    if (slot < order.size()) {
      const Agent& a = scene.agents[order[slot]];
      const Vec2 rel = scene.to_ego(a.footprint.center);
      const Vec2 vel = rotated(a.velocity, -scene.ego.heading);
      f.v[base + 0] = rel.x / 20.0;
      f.v[base + 1] = rel.y / 20.0;
      f.v[base + 2] = vel.x / 10.0;
      f.v[base + 3] = vel.y / 10.0;
    } else {
      f.v[base + 0] = 5.0;
      f.v[base + 1] = 0.0;
      f.v[base + 2] = 0.0;
      f.v[base + 3] = 0.0;
    }
  }

  const double lookaheads[4] = {5.0, 10.0, 20.0, 30.0};
  for (std::size_t i = 0; i < 4; ++i) {
    const double s = s_ego + lookaheads[i];
    const double rel_heading = detail::wrap_angle(scene.centerline.heading_at(s) - scene.ego.heading);
    f.v[19 + i] = rel_heading;
    f.v[23 + i] = scene.to_ego(scene.centerline.point_at(s)).y / 10.0;
  }

  const double clearance_lookaheads[3] = {5.0, 15.0, 30.0};
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = s_ego + clearance_lookaheads[i];
    const Vec2 p = scene.centerline.point_at(s);
    const double h = scene.centerline.heading_at(s);
    const Vec2 left{-std::sin(h), std::cos(h)};
    for (int side = 0; side < 2; ++side) {
      const Vec2 dir = side == 0 ? left : Vec2{-left.x, -left.y};
      double clear = 5.0;
      for (double d = 0.25; d <= 5.0; d += 0.25) {
        if (!scene.drivable.is_drivable(p + d * dir)) {
          clear = d - 0.25;
          break;
        }
      }
      f.v[27 + 2 * i + static_cast<std::size_t>(side)] = clear / 5.0;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

enum class ExpansionVariant : std::uint8_t { polar = 0, xy = 1, gaussian = 2 };

inline const char* to_string(ExpansionVariant v) {
  switch (v) {
    case ExpansionVariant::polar: return "polar";
    case ExpansionVariant::xy: return "xy";
    case ExpansionVariant::gaussian: return "gaussian";
  }
  return "unknown";
}

inline ExpansionVariant expansion_variant_from_string(const std::string& s) {
  if (s == "polar") return ExpansionVariant::polar;
  if (s == "xy") return ExpansionVariant::xy;
  if (s == "gaussian") return ExpansionVariant::gaussian;
  throw std::invalid_argument("unknown expansion variant: " + s);
}

struct PolicyConfig {
  std::size_t horizon = 8;
  double timestep_s = 0.5;
  std::size_t anchor_count = 20;  // intention anchors scored by stage 1
  std::size_t top_k = 2;          // intentions kept for refinement
  ExpansionConfig expansion = ExpansionConfig::defaults();
  ExpansionVariant variant = ExpansionVariant::polar;
  double gaussian_sigma = 0.5;  // used only by the gaussian variant
  double gamma_dist = 0.6;
  double gamma_pdms = 0.05;
  double gamma_rl = 0.01;
  double beta = 0.05;  // soft distance-label sharpness, 1/m^2
  std::size_t hidden = 32;
  std::size_t delta_basis = 4;  // temporal basis functions per axis for the delta heads
  std::size_t cls_rank = 8;     // rank of the anchor-scene interaction on the intention logit
  double stage1_delta_scale = 10.0;
  double stage2_delta_scale = 1.0;
  DiffusionSchedule schedule = DiffusionSchedule::linear();
  std::vector<std::string> safety_metrics = {"nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc"};
  MetricWeights weights;
  VocabularySpec anchor_spec;  // intention-anchor generation grid

  std::size_t refined_count() const { return top_k * expansion.variant_count(); }

  void validate() const {
    if (horizon < 2) throw std::invalid_argument("policy config: horizon must be >= 2");
    if (!(timestep_s > 0.0)) throw std::invalid_argument("policy config: timestep must be positive");
    if (anchor_count < 1) throw std::invalid_argument("policy config: anchor_count must be >= 1");
    if (top_k < 1 || top_k > anchor_count)
      throw std::invalid_argument("policy config: top_k must be in [1, anchor_count]");
    if (!(beta > 0.0)) throw std::invalid_argument("policy config: beta must be positive");
    if (delta_basis < 1 || delta_basis > horizon)
      throw std::invalid_argument("policy config: delta_basis must be in [1, horizon]");
    if (cls_rank < 1) throw std::invalid_argument("policy config: cls_rank must be >= 1");
    if (gamma_dist < 0.0 || gamma_pdms < 0.0 || gamma_rl < 0.0)
      throw std::invalid_argument("policy config: ensemble gains must be >= 0");
    expansion.validate();
    schedule.validate();
    weights.validate();
    if (safety_metrics.empty()) throw std::invalid_argument("policy config: empty safety metric set");
  }
};

namespace detail {

constexpr double kCoordScale = 1.0 / 20.0;  // trajectory coords -> MLP input range
constexpr double kRelScale = 1.0 / 2.0;      // within-group candidate offsets -> MLP input range

// Flat-parameter layout for the two decoder MLPs and their heads. The
// trajectory-delta heads emit coefficients of a smooth temporal basis (not
// raw per-waypoint offsets), so decoded adjustments cannot introduce
// high-frequency jitter.
struct ParamLayout {
  std::size_t coords = 0;     // 2T
  std::size_t basis_dim = 0;  // 2 * delta_basis
  std::size_t rank = 0;       // anchor-scene interaction rank
  std::size_t in1 = 0, in2 = 0, hidden = 0, metrics = 0;
  std::size_t s1_w = 0, s1_b = 0, s1_a = 0, s1_c = 0, s1_wc = 0, s1_dc = 0;
  std::size_t s1_q = 0, s1_k = 0;  // intention logit: (Q anchor) . (K features)
  std::size_t s2_w = 0, s2_b = 0, s2_a = 0, s2_c = 0, s2_wd = 0, s2_dd = 0;
  std::size_t s2_bs_w = 0, s2_bs_b = 0, s2_cr_w = 0, s2_cr_b = 0;
  std::size_t total = 0;

  static ParamLayout of(const PolicyConfig& cfg) {
    ParamLayout l;
    l.coords = 2 * cfg.horizon;
    l.basis_dim = 2 * cfg.delta_basis;
    l.rank = cfg.cls_rank;
    l.in1 = 2 * l.coords + SceneFeatures::kDim;
    l.in2 = 2 * l.coords + SceneFeatures::kDim;  // candidate, candidate-minus-source, features
    l.hidden = cfg.hidden;
    l.metrics = cfg.safety_metrics.size();
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
      const std::size_t off = at;
      at += n;
      return off;
    };
    l.s1_w = take(l.hidden * l.in1);
    l.s1_b = take(l.hidden);
    l.s1_a = take(l.basis_dim * l.hidden);
    l.s1_c = take(l.basis_dim);
    l.s1_wc = take(l.hidden);
    l.s1_dc = take(1);
    l.s1_q = take(l.rank * l.coords);
    l.s1_k = take(l.rank * SceneFeatures::kDim);
    l.s2_w = take(l.hidden * l.in2);
    l.s2_b = take(l.hidden);
    l.s2_a = take(l.basis_dim * l.hidden);
    l.s2_c = take(l.basis_dim);
    l.s2_wd = take(l.hidden);
    l.s2_dd = take(1);
    l.s2_bs_w = take(l.metrics * l.hidden);
    l.s2_bs_b = take(l.metrics);
    l.s2_cr_w = take(l.metrics * l.hidden);
    l.s2_cr_b = take(l.metrics);
    l.total = at;
    return l;
  }
};

// Chebyshev basis over the waypoint index, row-major T x K.
inline std::vector<double> temporal_basis(std::size_t horizon, std::size_t k_basis) {
  std::vector<double> basis(horizon * k_basis);
  for (std::size_t t = 0; t < horizon; ++t) {
    const double u = horizon == 1 ? 0.0
                                  : 2.0 * static_cast<double>(t) / static_cast<double>(horizon - 1) - 1.0;
    double prev2 = 1.0, prev1 = u;
    for (std::size_t k = 0; k < k_basis; ++k) {
      double value;
      if (k == 0) {
        value = 1.0;
      } else if (k == 1) {
        value = u;
      } else {
        value = 2.0 * u * prev1 - prev2;
        prev2 = prev1;
        prev1 = value;
      }
      basis[t * k_basis + k] = value;
    }
  }
  return basis;
}

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

}  // namespace detail

/// Trainable state: the fixed intention anchors plus one flat parameter
/// vector covering both decoders and all scoring heads.
struct PolicyState {
  PolicyConfig config;
  std::vector<Trajectory> anchors;
  std::vector<double> params;

  static std::vector<Trajectory> make_anchors(const PolicyConfig& cfg) {
    VocabularySpec spec = cfg.anchor_spec;
    spec.horizon = cfg.horizon;
    spec.timestep_s = cfg.timestep_s;
    return build_vocabulary(spec, cfg.anchor_count).trajectories;
  }

  static PolicyState zeros(PolicyConfig cfg) {
    cfg.validate();
    PolicyState s;
    s.config = std::move(cfg);
    s.anchors = make_anchors(s.config);
    s.params.assign(detail::ParamLayout::of(s.config).total, 0.0);
    return s;
  }

  /// Random trunk and scoring-head weights; the trajectory-delta heads start
  /// at zero so initial outputs stay on the noised anchors and the first
  /// training steps are well-conditioned.
  static PolicyState random(PolicyConfig cfg, std::uint64_t seed, double scale = 0.2) {
    PolicyState s = zeros(std::move(cfg));
    const auto layout = detail::ParamLayout::of(s.config);
    Rng rng(derive_seed(seed, "policy-init"));
    auto fill = [&](std::size_t off, std::size_t rows, std::size_t cols) {
      const double sd = scale / std::sqrt(static_cast<double>(cols));
      for (std::size_t i = 0; i < rows * cols; ++i) s.params[off + i] = rng.normal(0.0, sd);
    };
    fill(layout.s1_w, layout.hidden, layout.in1);
    fill(layout.s1_wc, 1, layout.hidden);
    fill(layout.s1_q, layout.rank, layout.coords);
    fill(layout.s1_k, layout.rank, SceneFeatures::kDim);
    fill(layout.s2_w, layout.hidden, layout.in2);
    fill(layout.s2_wd, 1, layout.hidden);
    fill(layout.s2_bs_w, layout.metrics, layout.hidden);
    fill(layout.s2_cr_w, layout.metrics, layout.hidden);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct Stage1Proposal {
  Trajectory trajectory;
  double logit = 0.0;
};

struct Stage2Output {
  Trajectory refined;
  double dist_logit = 0.0;
  std::vector<double> safety_logits;
  std::vector<double> rl_logits;

  double dist_score() const { return detail::logistic(dist_logit); }
  double safety_score(std::size_t m) const { return detail::logistic(safety_logits[m]); }
  double rl_score(std::size_t m) const { return detail::logistic(rl_logits[m]); }
};

namespace detail {

struct MlpCache {
  std::vector<double> input;
  std::vector<double> hidden;
};

// h = tanh(W u + b); heads read h.
inline void mlp_trunk(const double* w, const double* b, const std::vector<double>& input, std::size_t in_dim,
                      std::size_t hidden, std::vector<double>& h) {
  h.resize(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    double acc = b[i];
    const double* row = w + i * in_dim;
    for (std::size_t j = 0; j < in_dim; ++j) acc += row[j] * input[j];
    h[i] = std::tanh(acc);
  }
}

inline double head_scalar(const double* w, double bias, const std::vector<double>& h) {
  double acc = bias;
  for (std::size_t i = 0; i < h.size(); ++i) acc += w[i] * h[i];
  return acc;
}

inline void head_vector(const double* w, const double* bias, std::size_t rows, const std::vector<double>& h,
                        std::vector<double>& out) {
  out.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = head_scalar(w + r * h.size(), bias[r], h);
}

inline std::vector<double> stage1_input(const Trajectory& anchor, const Trajectory& noised,
                                        const SceneFeatures& feats) {
  std::vector<double> u;
  u.reserve(4 * anchor.size() + SceneFeatures::kDim);
  for (Vec2 w : anchor.waypoints) {
    u.push_back(w.x * kCoordScale);
    u.push_back(w.y * kCoordScale);
  }
  for (Vec2 w : noised.waypoints) {
    u.push_back(w.x * kCoordScale);
    u.push_back(w.y * kCoordScale);
  }
  u.insert(u.end(), feats.v.begin(), feats.v.end());
  return u;
}

inline std::vector<double> stage2_input(const Trajectory& candidate, const Trajectory& source,
                                        const SceneFeatures& feats) {
  std::vector<double> u;
  u.reserve(4 * candidate.size() + SceneFeatures::kDim);
  for (Vec2 w : candidate.waypoints) {
    u.push_back(w.x * kCoordScale);
    u.push_back(w.y * kCoordScale);
  }
  for (std::size_t t = 0; t < candidate.size(); ++t) {
    const Vec2 r = candidate.waypoints[t] - source.waypoints[t];
    u.push_back(r.x * kRelScale);
    u.push_back(r.y * kRelScale);
  }
  u.insert(u.end(), feats.v.begin(), feats.v.end());
  return u;
}

// Evaluate the basis-coefficient delta head and add the decoded offsets.
inline void apply_delta_head(const double* a, const double* c, const std::vector<double>& h,
                             const std::vector<double>& basis, std::size_t basis_dim, double scale,
                             Trajectory& traj) {
  const std::size_t k_basis = basis_dim / 2;
  std::vector<double> coeff(basis_dim);
  for (std::size_t b = 0; b < basis_dim; ++b)
    coeff[b] = scale * head_scalar(a + b * h.size(), c[b], h);
  for (std::size_t t = 0; t < traj.size(); ++t) {
    double dx = 0.0, dy = 0.0;
    for (std::size_t k = 0; k < k_basis; ++k) {
      const double bt = basis[t * k_basis + k];
      dx += bt * coeff[2 * k];
      dy += bt * coeff[2 * k + 1];
    }
    traj.waypoints[t].x += dx;
    traj.waypoints[t].y += dy;
  }
}

}  // namespace detail

/// Noise the intention anchors at the given schedule step (1-based), one
/// derived noise stream per anchor.
inline std::vector<Trajectory> noise_anchors(const PolicyState& state, std::size_t step, std::uint64_t seed) {
  std::vector<Trajectory> out;
  out.reserve(state.anchors.size());
  for (std::size_t j = 0; j < state.anchors.size(); ++j)
    out.push_back(forward_diffuse(state.anchors[j], state.config.schedule, step, derive_seed(seed, j)));
  return out;
}

/// Stage 1: map each (anchor, noised anchor, features) triple to a denoised
/// trajectory and an intention-region logit.
inline std::vector<Stage1Proposal> stage1_propose(const PolicyState& state, const SceneFeatures& feats,
                                                  const std::vector<Trajectory>& noised_anchors,
                                                  std::vector<detail::MlpCache>* caches = nullptr) {
  const auto layout = detail::ParamLayout::of(state.config);
  if (noised_anchors.size() != state.anchors.size())
    throw std::invalid_argument("stage1_propose: noised anchor count mismatch");
  const double* P = state.params.data();
  const auto basis = detail::temporal_basis(state.config.horizon, state.config.delta_basis);

  // Scene key for the anchor-scene interaction term of the intention logit.
  std::vector<double> key(layout.rank);
  for (std::size_t r = 0; r < layout.rank; ++r) {
    double acc = 0.0;
    const double* row = P + layout.s1_k + r * SceneFeatures::kDim;
    for (std::size_t d = 0; d < SceneFeatures::kDim; ++d) acc += row[d] * feats.v[d];
    key[r] = acc;
  }
  const double rank_scale = 1.0 / std::sqrt(static_cast<double>(layout.rank));

  std::vector<Stage1Proposal> out(noised_anchors.size());
  if (caches) caches->resize(noised_anchors.size());
  for (std::size_t j = 0; j < noised_anchors.size(); ++j) {
    auto input = detail::stage1_input(state.anchors[j], noised_anchors[j], feats);
    std::vector<double> h;
    detail::mlp_trunk(P + layout.s1_w, P + layout.s1_b, input, layout.in1, layout.hidden, h);
    Trajectory traj = noised_anchors[j];
    detail::apply_delta_head(P + layout.s1_a, P + layout.s1_c, h, basis, layout.basis_dim,
                             state.config.stage1_delta_scale, traj);
    out[j].trajectory = std::move(traj);

    double logit = detail::head_scalar(P + layout.s1_wc, P[layout.s1_dc], h);
    for (std::size_t r = 0; r < layout.rank; ++r) {
      double q = 0.0;
      const double* row = P + layout.s1_q + r * layout.coords;
      for (std::size_t c = 0; c < layout.coords; ++c) q += row[c] * input[c];  // scaled anchor block
      logit += rank_scale * q * key[r];
    }
    out[j].logit = logit;
    if (caches) (*caches)[j] = {std::move(input), std::move(h)};
  }
  return out;
}

inline std::vector<Stage1Proposal> stage1_propose(const PolicyState& state, const SceneFeatures& feats,
                                                  std::size_t step, std::uint64_t seed) {
  return stage1_propose(state, feats, noise_anchors(state, step, seed));
}

/// Indices of the k highest-logit proposals, descending logit, ties to the
/// lower index.
inline std::vector<std::size_t> select_topk(const std::vector<Stage1Proposal>& proposals, std::size_t k) {
  if (k < 1 || k > proposals.size()) throw std::invalid_argument("select_topk: k out of range");
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return proposals[a].logit > proposals[b].logit;
  });
  order.resize(k);
  return order;
}

/// Expanded candidate set for the refinement stage, with the per-candidate
/// linear map (d candidate / d source waypoint) kept for backpropagation.
/// Every variant of one source trajectory is an affine function of it:
/// polar expansion is a rotation-scaling, xy expansion an axis scaling, and
/// the gaussian baseline an additive offset.
struct ExpandedCandidates {
  struct LinearMap {
    double a = 1.0, b = 0.0, c = 0.0, d = 1.0;  // [x'; y'] = [a b; c d][x; y] (+ offset)
  };
  std::vector<Trajectory> trajectories;  // top_k * group_size
  std::vector<Trajectory> sources;       // the selected trajectory each candidate came from
  std::vector<LinearMap> maps;           // one per candidate
  std::size_t group_size = 0;
  std::size_t group_count = 0;
};

inline ExpandedCandidates expand_candidates(const std::vector<Trajectory>& selected, const PolicyConfig& cfg,
                                            std::uint64_t seed) {
  ExpandedCandidates out;
  out.group_size = cfg.expansion.variant_count();
  out.group_count = selected.size();
  out.trajectories.reserve(out.group_size * selected.size());
  out.maps.reserve(out.group_size * selected.size());
  for (std::size_t k = 0; k < selected.size(); ++k) {
    for (std::size_t j = 0; j < out.group_size; ++j) out.sources.push_back(selected[k]);
    switch (cfg.variant) {
      case ExpansionVariant::polar: {
        auto variants = expand_polar(selected[k], cfg.expansion);
        std::size_t v = 0;
        for (double lambda : cfg.expansion.radial_coeffs) {
          for (double delta : cfg.expansion.angular_coeffs) {
            out.maps.push_back({lambda * std::cos(delta), -lambda * std::sin(delta), lambda * std::sin(delta),
                                lambda * std::cos(delta)});
            out.trajectories.push_back(std::move(variants[v++]));
          }
        }
        break;
      }
      case ExpansionVariant::xy: {
        auto variants = expand_xy(selected[k], cfg.expansion);
        std::size_t v = 0;
        for (double lambda : cfg.expansion.radial_coeffs) {
          for (double delta : cfg.expansion.angular_coeffs) {
            out.maps.push_back({lambda, 0.0, 0.0, 1.0 + std::tan(delta)});
            out.trajectories.push_back(std::move(variants[v++]));
          }
        }
        break;
      }
      case ExpansionVariant::gaussian: {
        for (std::size_t j = 0; j < out.group_size; ++j) {
          out.trajectories.push_back(
              perturb_gaussian(selected[k], cfg.gaussian_sigma, derive_seed(seed, k * out.group_size + j)));
          out.maps.push_back({1.0, 0.0, 0.0, 1.0});
        }
        break;
      }
    }
  }
  return out;
}

/// Stage 2: refine each expanded candidate and predict the distance, safety
/// and RL heads for it. Candidates are encoded both absolutely and relative
/// to the selected trajectory they expand.
inline std::vector<Stage2Output> stage2_refine(const PolicyState& state, const SceneFeatures& feats,
                                               const std::vector<Trajectory>& expanded,
                                               const std::vector<Trajectory>& sources,
                                               std::vector<detail::MlpCache>* caches = nullptr) {
  const auto layout = detail::ParamLayout::of(state.config);
  const double* P = state.params.data();
  const auto basis = detail::temporal_basis(state.config.horizon, state.config.delta_basis);
  if (sources.size() != expanded.size())
    throw std::invalid_argument("stage2_refine: candidate/source count mismatch");
  std::vector<Stage2Output> out(expanded.size());
  if (caches) caches->resize(expanded.size());
  for (std::size_t j = 0; j < expanded.size(); ++j) {
    if (expanded[j].size() != state.config.horizon)
      throw std::invalid_argument("stage2_refine: candidate horizon mismatch");
    auto input = detail::stage2_input(expanded[j], sources[j], feats);
    std::vector<double> h;
    detail::mlp_trunk(P + layout.s2_w, P + layout.s2_b, input, layout.in2, layout.hidden, h);
    Trajectory refined = expanded[j];
    detail::apply_delta_head(P + layout.s2_a, P + layout.s2_c, h, basis, layout.basis_dim,
                             state.config.stage2_delta_scale, refined);
    out[j].refined = std::move(refined);
    out[j].dist_logit = detail::head_scalar(P + layout.s2_wd, P[layout.s2_dd], h);
    detail::head_vector(P + layout.s2_bs_w, P + layout.s2_bs_b, layout.metrics, h, out[j].safety_logits);
    detail::head_vector(P + layout.s2_cr_w, P + layout.s2_cr_b, layout.metrics, h, out[j].rl_logits);
    if (caches) (*caches)[j] = {std::move(input), std::move(h)};
  }
  return out;
}

/// Candidates without expansion context: the relative block is zero.
inline std::vector<Stage2Output> stage2_refine(const PolicyState& state, const SceneFeatures& feats,
                                               const std::vector<Trajectory>& expanded,
                                               std::vector<detail::MlpCache>* caches = nullptr) {
  return stage2_refine(state, feats, expanded, expanded, caches);
}

/// Log-domain score fusion per candidate:
///   pdms = sum_mp lambda_mp * log s_mp
///          + lambda_avg * log(sum_ma lambda_ma s_ma / sum_ma lambda_ma)
/// evaluated on the squashed safety heads, the same form again on the
/// squashed RL heads, then gamma-weighted with the squashed distance head.
/// Scores are clamped to >= 1e-6 before the logs; the average term is
/// normalized by its weight sum so the log argument stays in (0, 1].
inline std::vector<double> ensemble_scores(const std::vector<Stage2Output>& outputs, const MetricWeights& weights,
                                           const PolicyConfig& cfg) {
  constexpr double kFloor = 1e-6;
  const auto& metric_names = cfg.safety_metrics;
  auto metric_pos = [&](const std::string& name) -> std::ptrdiff_t {
    for (std::size_t i = 0; i < metric_names.size(); ++i)
      if (metric_names[i] == name) return static_cast<std::ptrdiff_t>(i);
    return -1;
  };

  double avg_weight_sum = 0.0;
  for (const auto& [name, w] : weights.ensemble_average)
    if (metric_pos(name) >= 0) avg_weight_sum += w;

  auto log_ensemble = [&](auto&& score_of) {
    double value = 0.0;
    for (const auto& [name, w] : weights.ensemble_penalty) {
      const std::ptrdiff_t pos = metric_pos(name);
      if (pos < 0) continue;
      value += w * std::log(std::max(kFloor, score_of(static_cast<std::size_t>(pos))));
    }
    if (avg_weight_sum > 0.0) {
      double avg = 0.0;
      for (const auto& [name, w] : weights.ensemble_average) {
        const std::ptrdiff_t pos = metric_pos(name);
        if (pos < 0) continue;
        avg += w * score_of(static_cast<std::size_t>(pos));
      }
      value += weights.lambda_avg * std::log(std::max(kFloor, avg / avg_weight_sum));
    }
    return value;
  };

  std::vector<double> scores(outputs.size());
  for (std::size_t j = 0; j < outputs.size(); ++j) {
    const Stage2Output& o = outputs[j];
    const double pdms = log_ensemble([&](std::size_t m) { return o.safety_score(m); });
    const double rl = log_ensemble([&](std::size_t m) { return o.rl_score(m); });
    scores[j] = cfg.gamma_dist * o.dist_score() + cfg.gamma_pdms * pdms + cfg.gamma_rl * rl;
  }
  return scores;
}

/// Softmax-weighted convex combination of the candidates, waypoint-wise.
inline Trajectory fuse_trajectories(const std::vector<Trajectory>& refined, const std::vector<double>& scores) {
  if (refined.empty() || refined.size() != scores.size())
    throw std::invalid_argument("fuse_trajectories: candidate/score count mismatch");
  double max_score = -1e300;
  for (double s : scores) max_score = std::max(max_score, s);
  std::vector<double> w(scores.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    w[j] = std::exp(scores[j] - max_score);
    sum += w[j];
  }
  Trajectory out;
  out.timestep_s = refined.front().timestep_s;
  out.waypoints.assign(refined.front().size(), Vec2{});
  for (std::size_t j = 0; j < refined.size(); ++j) {
    if (refined[j].size() != out.waypoints.size())
      throw std::invalid_argument("fuse_trajectories: inconsistent waypoint counts");
    const double weight = w[j] / sum;
    for (std::size_t t = 0; t < out.waypoints.size(); ++t) out.waypoints[t] += weight * refined[j].waypoints[t];
  }
  return out;
}

/// Full planning pass: encode, propose, select, expand, refine, score, fuse.
/// Deterministic for fixed (state, scene, cfg, seed); the single denoising
/// pass runs at the last schedule step.
inline Trajectory plan(const PolicyState& state, const Scene& scene, const PolicyConfig& cfg,
                       std::uint64_t seed) {
  cfg.validate();
  const SceneFeatures feats = encode_scene(scene);
  const auto proposals = stage1_propose(state, feats, cfg.schedule.steps(), derive_seed(seed, "plan-noise"));
  const auto selected_idx = select_topk(proposals, cfg.top_k);
  std::vector<Trajectory> selected;
  selected.reserve(selected_idx.size());
  for (std::size_t idx : selected_idx) selected.push_back(proposals[idx].trajectory);
  const auto candidates = expand_candidates(selected, cfg, derive_seed(seed, "plan-expand"));
  const auto outputs = stage2_refine(state, feats, candidates.trajectories, candidates.sources);
  const auto scores = ensemble_scores(outputs, cfg.weights, cfg);
  std::vector<Trajectory> refined;
  refined.reserve(outputs.size());
  for (const auto& o : outputs) refined.push_back(o.refined);
  return fuse_trajectories(refined, scores);
}

inline Trajectory plan(const PolicyState& state, const Scene& scene, std::uint64_t seed) {
  return plan(state, scene, state.config, seed);
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "HPOL", u32 version, length-prefixed JSON config
// block, u64-count f64 parameter block, CRC32 trailer.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kPolicyVersion = 1;

inline nlohmann::json policy_config_to_json(const PolicyConfig& cfg) {
  nlohmann::json j;
  j["horizon"] = cfg.horizon;
  j["timestep_s"] = cfg.timestep_s;
  j["anchor_count"] = cfg.anchor_count;
  j["top_k"] = cfg.top_k;
  j["radial_coeffs"] = cfg.expansion.radial_coeffs;
  j["angular_coeffs"] = cfg.expansion.angular_coeffs;
  j["variant"] = to_string(cfg.variant);
  j["gaussian_sigma"] = cfg.gaussian_sigma;
  j["gamma_dist"] = cfg.gamma_dist;
  j["gamma_pdms"] = cfg.gamma_pdms;
  j["gamma_rl"] = cfg.gamma_rl;
  j["beta"] = cfg.beta;
  j["hidden"] = cfg.hidden;
  j["delta_basis"] = cfg.delta_basis;
  j["cls_rank"] = cfg.cls_rank;
  j["stage1_delta_scale"] = cfg.stage1_delta_scale;
  j["stage2_delta_scale"] = cfg.stage2_delta_scale;
  j["alpha_bar"] = cfg.schedule.alpha_bar;
  j["safety_metrics"] = cfg.safety_metrics;
  j["anchor_min_speed"] = cfg.anchor_spec.min_speed;
  j["anchor_max_speed"] = cfg.anchor_spec.max_speed;
  j["anchor_max_turn"] = cfg.anchor_spec.max_turn;
  j["avg_weights"] = nlohmann::json::object();
  for (const auto& [name, w] : cfg.weights.avg_set) j["avg_weights"][name] = w;
  j["penalty_set"] = cfg.weights.penalty_set;
  j["ensemble_penalty"] = cfg.weights.ensemble_penalty;
  j["ensemble_average"] = cfg.weights.ensemble_average;
  j["lambda_avg"] = cfg.weights.lambda_avg;
  return j;
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig cfg;
  cfg.horizon = j.at("horizon").get<std::size_t>();
  cfg.timestep_s = j.at("timestep_s").get<double>();
  cfg.anchor_count = j.at("anchor_count").get<std::size_t>();
  cfg.top_k = j.at("top_k").get<std::size_t>();
  cfg.expansion.radial_coeffs = j.at("radial_coeffs").get<std::vector<double>>();
  cfg.expansion.angular_coeffs = j.at("angular_coeffs").get<std::vector<double>>();
  cfg.variant = expansion_variant_from_string(j.at("variant").get<std::string>());
  cfg.gaussian_sigma = j.at("gaussian_sigma").get<double>();
  cfg.gamma_dist = j.at("gamma_dist").get<double>();
  cfg.gamma_pdms = j.at("gamma_pdms").get<double>();
  cfg.gamma_rl = j.at("gamma_rl").get<double>();
  cfg.beta = j.at("beta").get<double>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.delta_basis = j.at("delta_basis").get<std::size_t>();
  cfg.cls_rank = j.at("cls_rank").get<std::size_t>();
  cfg.stage1_delta_scale = j.at("stage1_delta_scale").get<double>();
  cfg.stage2_delta_scale = j.at("stage2_delta_scale").get<double>();
  cfg.schedule.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
  cfg.safety_metrics = j.at("safety_metrics").get<std::vector<std::string>>();
  cfg.anchor_spec.min_speed = j.at("anchor_min_speed").get<double>();
  cfg.anchor_spec.max_speed = j.at("anchor_max_speed").get<double>();
  cfg.anchor_spec.max_turn = j.at("anchor_max_turn").get<double>();
  cfg.weights.avg_set.clear();
  for (const auto& [name, w] : j.at("avg_weights").items()) cfg.weights.avg_set.emplace_back(name, w.get<double>());
  cfg.weights.penalty_set = j.at("penalty_set").get<std::vector<std::string>>();
  cfg.weights.ensemble_penalty = j.at("ensemble_penalty").get<std::map<std::string, double>>();
  cfg.weights.ensemble_average = j.at("ensemble_average").get<std::map<std::string, double>>();
  cfg.weights.lambda_avg = j.at("lambda_avg").get<double>();
  return cfg;
}

inline void save_policy(const PolicyState& state, const std::string& path) {
  std::vector<std::uint8_t> buf;
  buf.push_back('H');
  buf.push_back('P');
  buf.push_back('O');
  buf.push_back('L');
  detail::put_u32(buf, kPolicyVersion);
  const std::string cfg = policy_config_to_json(state.config).dump();
  detail::put_u32(buf, static_cast<std::uint32_t>(cfg.size()));
  buf.insert(buf.end(), cfg.begin(), cfg.end());
  detail::put_u32(buf, static_cast<std::uint32_t>(state.params.size()));
  for (double v : state.params) detail::put_f64(buf, v);
  detail::put_u32(buf, detail::crc32(buf.data(), buf.size()));
  detail::write_file(path, buf);
}

inline PolicyState load_policy(const std::string& path) {
  const auto buf = detail::read_file(path);
  if (buf.size() < 20) throw FormatError("policy checkpoint truncated: " + path);
  const std::uint32_t stored_crc =
      static_cast<std::uint32_t>(buf[buf.size() - 4]) | (static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8) |
      (static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16) |
      (static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24);
  if (detail::crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw FormatError("policy checkpoint checksum mismatch: " + path);
  detail::ByteReader reader(buf.data(), buf.size() - 4);
  if (reader.bytes(4) != "HPOL") throw FormatError("policy checkpoint bad magic: " + path);
  if (reader.u32() != kPolicyVersion) throw FormatError("policy checkpoint unsupported version: " + path);
  const std::uint32_t cfg_len = reader.u32();
  const PolicyConfig cfg = policy_config_from_json(nlohmann::json::parse(reader.bytes(cfg_len)));
  PolicyState state = PolicyState::zeros(cfg);
  const std::uint32_t count = reader.u32();
  if (count != state.params.size()) throw FormatError("policy checkpoint parameter count mismatch: " + path);
  for (double& v : state.params) v = reader.f64();
  if (reader.remaining() != 0) throw FormatError("policy checkpoint trailing bytes: " + path);
  return state;
}

}  // namespace trajkit
