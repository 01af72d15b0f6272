// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajkit/mdpo.hpp"
#include "trajkit/policy.hpp"
#include "trajkit/reward_cache.hpp"

namespace trajkit {

struct LossWeights {
  double lambda_reg = 8.0;
  double lambda_cls = 10.0;
  double lambda_dist = 10.0;
  double lambda_safe = 1.0;
  double lambda_rl = 1.0;
  double lambda_global = 12.0;
  double lambda_local = 12.0;
};

// ---------------------------------------------------------------------------
// Region labels: the anchors tile the intention space into cells, and an
// expert generally falls between grid points, so its sub-region is covered
// by the two nearest anchors. Those are the positives (ties to the lower
// index); every other anchor keeps its own intention untouched, which
// preserves the diversity of the proposal set.
// ---------------------------------------------------------------------------

struct RegionLabels {
  std::vector<double> y;
  std::vector<std::size_t> positives;
};

inline RegionLabels region_labels(const std::vector<Trajectory>& anchors, const Trajectory& expert) {
  if (anchors.empty()) throw std::invalid_argument("region_labels: empty anchor set");
  RegionLabels labels;
  labels.y.assign(anchors.size(), 0.0);
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trajectory_distance(anchors[a], expert) < trajectory_distance(anchors[b], expert);
  });
  const std::size_t n_pos = std::min<std::size_t>(2, anchors.size());
  for (std::size_t i = 0; i < n_pos; ++i) {
    labels.y[order[i]] = 1.0;
    labels.positives.push_back(order[i]);
  }
  std::sort(labels.positives.begin(), labels.positives.end());
  return labels;
}

// ---------------------------------------------------------------------------
// Intention-establishment loss: squared-L2 regression of positive-region
// proposals onto the expert plus softmax cross-entropy of the region logits.
// ---------------------------------------------------------------------------

struct Stage1Grad {
  std::vector<std::vector<double>> d_traj;  // per proposal, flat 2T
  std::vector<double> d_logit;
};

inline double loss_global(const std::vector<Stage1Proposal>& proposals, const Trajectory& expert,
                          const RegionLabels& labels, const LossWeights& w, double* reg_out = nullptr,
                          double* cls_out = nullptr, Stage1Grad* grad = nullptr) {
  if (proposals.size() != labels.y.size())
    throw std::invalid_argument("loss_global: proposal/label count mismatch");
  const std::size_t coords = 2 * expert.size();
  if (grad) {
    grad->d_traj.assign(proposals.size(), std::vector<double>(coords, 0.0));
    grad->d_logit.assign(proposals.size(), 0.0);
  }

  double reg = 0.0;
  for (std::size_t j : labels.positives) {
    const auto& wp = proposals[j].trajectory.waypoints;
    if (wp.size() != expert.size()) throw std::invalid_argument("loss_global: horizon mismatch");
    for (std::size_t t = 0; t < wp.size(); ++t) {
      const Vec2 d = wp[t] - expert.waypoints[t];
      reg += d.x * d.x + d.y * d.y;
      if (grad) {
        (*grad).d_traj[j][2 * t] += w.lambda_reg * 2.0 * d.x;
        (*grad).d_traj[j][2 * t + 1] += w.lambda_reg * 2.0 * d.y;
      }
    }
  }

  // Softmax cross-entropy against the normalized multi-hot target.
  double ysum = 0.0;
  for (double v : labels.y) ysum += v;
  double max_logit = -1e300;
  for (const auto& p : proposals) max_logit = std::max(max_logit, p.logit);
  double expsum = 0.0;
  for (const auto& p : proposals) expsum += std::exp(p.logit - max_logit);
  double cls = 0.0;
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    const double logp = proposals[j].logit - max_logit - std::log(expsum);
    const double q = labels.y[j] / ysum;
    if (q > 0.0) cls -= q * logp;
    if (grad) (*grad).d_logit[j] = w.lambda_cls * (std::exp(logp) - q);
  }

  if (reg_out) *reg_out = reg;
  if (cls_out) *cls_out = cls;
  return w.lambda_reg * reg + w.lambda_cls * cls;
}

// ---------------------------------------------------------------------------
// Refinement loss: BCE of the distance head against Gaussian-kernel
// max-normalized proximity labels, BCE of the safety heads against retrieved
// reference scores, and the negated decoupled-metric objective on the RL
// heads (grouped per selected intention). The proximity labels are a
// function of the refined trajectories, so their gradient flows back into
// the trajectory path as well.
// ---------------------------------------------------------------------------

struct LocalLossParts {
  double dist = 0.0;
  double safe = 0.0;
  double rl = 0.0;
  double J = 0.0;
  double total = 0.0;
};

/// Gaussian-kernel proximity to the expert, max-normalized so the nearest
/// candidate gets exactly 1. Computed in log space relative to the winner.
inline std::vector<double> soft_distance_labels(const std::vector<Trajectory>& candidates,
                                                const Trajectory& expert, double beta) {
  if (candidates.empty()) throw std::invalid_argument("soft_distance_labels: empty candidate set");
  std::vector<double> sqdist(candidates.size(), 0.0);
  std::size_t winner = 0;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const auto& wp = candidates[j].waypoints;
    if (wp.size() != expert.size()) throw std::invalid_argument("soft_distance_labels: horizon mismatch");
    for (std::size_t t = 0; t < wp.size(); ++t) sqdist[j] += squared_norm(wp[t] - expert.waypoints[t]);
    if (sqdist[j] < sqdist[winner]) winner = j;
  }
  std::vector<double> labels(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) labels[j] = std::exp(-beta * (sqdist[j] - sqdist[winner]));
  return labels;
}

struct Stage2Grad {
  std::vector<double> d_dist_logit;
  std::vector<std::vector<double>> d_safety;
  std::vector<std::vector<double>> d_rl;
};

namespace detail {

inline double bce_with_logit(double z, double target) { return softplus(-z) + (1.0 - target) * z; }

}  // namespace detail

/// The distance labels and retrieved scores enter as fixed supervision
/// targets: like the cache lookups, the soft labels are recomputed every
/// training step but carry no gradient.
inline LocalLossParts loss_local(const std::vector<Stage2Output>& outputs,
                                 const std::vector<double>& distance_labels,
                                 const std::vector<SubMetricScores>& retrieved, std::size_t group_count,
                                 std::size_t group_size, const PolicyConfig& cfg, const LossWeights& w,
                                 const MdpoConfig& mdpo_cfg, Stage2Grad* grad = nullptr) {
  const std::size_t n = outputs.size();
  if (n == 0 || retrieved.size() != n || distance_labels.size() != n)
    throw std::invalid_argument("loss_local: candidate/target count mismatch");
  if (group_count * group_size != n) throw std::invalid_argument("loss_local: group layout does not cover candidates");
  if (mdpo_cfg.metrics != cfg.safety_metrics)
    throw std::invalid_argument("loss_local: mdpo metric set must match the policy safety metric set");
  const std::size_t nm = cfg.safety_metrics.size();

  if (grad) {
    grad->d_dist_logit.assign(n, 0.0);
    grad->d_safety.assign(n, std::vector<double>(nm, 0.0));
    grad->d_rl.assign(n, std::vector<double>(nm, 0.0));
  }

  LocalLossParts parts;

  for (std::size_t j = 0; j < n; ++j) {
    const double z = outputs[j].dist_logit;
    parts.dist += detail::bce_with_logit(z, distance_labels[j]);
    if (grad) (*grad).d_dist_logit[j] += w.lambda_dist * (detail::logistic(z) - distance_labels[j]);
  }

  // Safety-head supervision from the retrieved reference scores.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t m = 0; m < nm; ++m) {
      const double target = retrieved[j].get(cfg.safety_metrics[m]);
      const double z = outputs[j].safety_logits[m];
      parts.safe += detail::bce_with_logit(z, target);
      if (grad) (*grad).d_safety[j][m] += w.lambda_safe * (detail::logistic(z) - target);
    }
  }

  // RL objective over per-intention groups.
  std::vector<ExpansionGroup> groups(group_count);
  for (std::size_t k = 0; k < group_count; ++k) {
    ExpansionGroup& g = groups[k];
    g.count = group_size;
    g.metric_count = nm;
    g.logits.resize(group_size * nm);
    g.rewards.resize(group_size * nm);
    for (std::size_t i = 0; i < group_size; ++i) {
      const std::size_t j = k * group_size + i;
      g.indices.push_back(j);
      for (std::size_t m = 0; m < nm; ++m) {
        g.logits[i * nm + m] = outputs[j].rl_logits[m];
        g.rewards[i * nm + m] = retrieved[j].get(cfg.safety_metrics[m]);
      }
    }
  }
  parts.J = total_objective(groups, mdpo_cfg);
  parts.rl = -parts.J;
  if (grad) {
    const auto rl_grads = rl_loss_gradient(groups, mdpo_cfg);
    for (std::size_t k = 0; k < group_count; ++k) {
      for (std::size_t i = 0; i < group_size; ++i) {
        const std::size_t j = k * group_size + i;
        for (std::size_t m = 0; m < nm; ++m)
          (*grad).d_rl[j][m] += w.lambda_rl * rl_grads[k][i * nm + m];
      }
    }
  }

  parts.total = w.lambda_dist * parts.dist + w.lambda_safe * parts.safe + w.lambda_rl * parts.rl;
  return parts;
}

// ---------------------------------------------------------------------------
// Backpropagation through the decoder MLPs.
// ---------------------------------------------------------------------------

namespace detail {

// Shared trunk backward: given d(hidden), accumulate trunk parameter
// gradients and optionally the input gradient.
inline void trunk_backward(const double* w, const std::vector<double>& input, const std::vector<double>& h,
                           const std::vector<double>& dh, std::size_t in_dim, std::size_t hidden, double* dw,
                           double* db, std::vector<double>* dinput) {
  for (std::size_t i = 0; i < hidden; ++i) {
    const double dpre = dh[i] * (1.0 - h[i] * h[i]);
    if (dpre == 0.0) continue;
    db[i] += dpre;
    double* dw_row = dw + i * in_dim;
    const double* w_row = w + i * in_dim;
    for (std::size_t j = 0; j < in_dim; ++j) {
      dw_row[j] += dpre * input[j];
      if (dinput) (*dinput)[j] += dpre * w_row[j];
    }
  }
}

// Backward of the basis delta head: project the waypoint gradient onto the
// basis, then accumulate head-parameter gradients and the hidden gradient.
inline void delta_head_backward(const double* a, const std::vector<double>& h,
                                const std::vector<double>& basis, std::size_t basis_dim, double scale,
                                const std::vector<double>& d_traj, double* ga, double* gc,
                                std::vector<double>& dh) {
  const std::size_t k_basis = basis_dim / 2;
  const std::size_t horizon = d_traj.size() / 2;
  std::vector<double> d_coeff(basis_dim, 0.0);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t k = 0; k < k_basis; ++k) {
      const double bt = basis[t * k_basis + k];
      d_coeff[2 * k] += scale * bt * d_traj[2 * t];
      d_coeff[2 * k + 1] += scale * bt * d_traj[2 * t + 1];
    }
  }
  for (std::size_t b = 0; b < basis_dim; ++b) {
    if (d_coeff[b] == 0.0) continue;
    gc[b] += d_coeff[b];
    const double* a_row = a + b * h.size();
    double* ga_row = ga + b * h.size();
    for (std::size_t i = 0; i < h.size(); ++i) {
      ga_row[i] += d_coeff[b] * h[i];
      dh[i] += d_coeff[b] * a_row[i];
    }
  }
}

inline void stage1_backward(const PolicyState& state, const ParamLayout& layout, const MlpCache& cache,
                            const std::vector<double>& basis, const SceneFeatures& feats,
                            const std::vector<double>& d_traj, double d_logit, std::vector<double>& grad) {
  const double* P = state.params.data();
  double* G = grad.data();
  const auto& h = cache.hidden;
  std::vector<double> dh(layout.hidden, 0.0);
  delta_head_backward(P + layout.s1_a, h, basis, layout.basis_dim, state.config.stage1_delta_scale, d_traj,
                      G + layout.s1_a, G + layout.s1_c, dh);
  if (d_logit != 0.0) {
    G[layout.s1_dc] += d_logit;
    const double* wc = P + layout.s1_wc;
    double* gwc = G + layout.s1_wc;
    for (std::size_t i = 0; i < layout.hidden; ++i) {
      gwc[i] += d_logit * h[i];
      dh[i] += d_logit * wc[i];
    }

    // Anchor-scene interaction: logit += (Q a . K f) / sqrt(rank); the anchor
    // block sits at the front of the cached input.
    const double rank_scale = 1.0 / std::sqrt(static_cast<double>(layout.rank));
    const double* anchor = cache.input.data();
    for (std::size_t r = 0; r < layout.rank; ++r) {
      const double* q_row = P + layout.s1_q + r * layout.coords;
      const double* k_row = P + layout.s1_k + r * SceneFeatures::kDim;
      double q = 0.0, k = 0.0;
      for (std::size_t c = 0; c < layout.coords; ++c) q += q_row[c] * anchor[c];
      for (std::size_t d = 0; d < SceneFeatures::kDim; ++d) k += k_row[d] * feats.v[d];
      const double dq = d_logit * rank_scale * k;
      const double dk = d_logit * rank_scale * q;
      double* gq_row = G + layout.s1_q + r * layout.coords;
      double* gk_row = G + layout.s1_k + r * SceneFeatures::kDim;
      for (std::size_t c = 0; c < layout.coords; ++c) gq_row[c] += dq * anchor[c];
      for (std::size_t d = 0; d < SceneFeatures::kDim; ++d) gk_row[d] += dk * feats.v[d];
    }
  }
  trunk_backward(P + layout.s1_w, cache.input, h, dh, layout.in1, layout.hidden, G + layout.s1_w,
                 G + layout.s1_b, nullptr);
}

// Returns the gradient with respect to the candidate waypoints (through the
// trunk input; the refinement head itself receives no loss gradient because
// the distance labels are supervision targets).
inline void stage2_backward(const PolicyState& state, const ParamLayout& layout, const MlpCache& cache,
                            double d_dist, const std::vector<double>& d_safety,
                            const std::vector<double>& d_rl, std::vector<double>& grad,
                            std::vector<double>& d_candidate, std::vector<double>& d_rel) {
  const double* P = state.params.data();
  double* G = grad.data();
  const auto& h = cache.hidden;
  std::vector<double> dh(layout.hidden, 0.0);
  if (d_dist != 0.0) {
    G[layout.s2_dd] += d_dist;
    const double* wd = P + layout.s2_wd;
    double* gwd = G + layout.s2_wd;
    for (std::size_t i = 0; i < layout.hidden; ++i) {
      gwd[i] += d_dist * h[i];
      dh[i] += d_dist * wd[i];
    }
  }
  for (std::size_t m = 0; m < layout.metrics; ++m) {
    if (d_safety[m] != 0.0) {
      G[layout.s2_bs_b + m] += d_safety[m];
      const double* row = P + layout.s2_bs_w + m * layout.hidden;
      double* grow = G + layout.s2_bs_w + m * layout.hidden;
      for (std::size_t i = 0; i < layout.hidden; ++i) {
        grow[i] += d_safety[m] * h[i];
        dh[i] += d_safety[m] * row[i];
      }
    }
    if (d_rl[m] != 0.0) {
      G[layout.s2_cr_b + m] += d_rl[m];
      const double* row = P + layout.s2_cr_w + m * layout.hidden;
      double* grow = G + layout.s2_cr_w + m * layout.hidden;
      for (std::size_t i = 0; i < layout.hidden; ++i) {
        grow[i] += d_rl[m] * h[i];
        dh[i] += d_rl[m] * row[i];
      }
    }
  }

  std::vector<double> dinput(layout.in2, 0.0);
  trunk_backward(P + layout.s2_w, cache.input, h, dh, layout.in2, layout.hidden, G + layout.s2_w,
                 G + layout.s2_b, &dinput);

  d_candidate.assign(layout.coords, 0.0);
  d_rel.assign(layout.coords, 0.0);
  for (std::size_t c = 0; c < layout.coords; ++c) {
    d_candidate[c] = dinput[c] * kCoordScale;
    d_rel[c] = dinput[layout.coords + c] * kRelScale;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full per-scene loss with analytic gradient through both stages, the
// expansion maps and the proximity labels (retrieved rewards are constants).
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double global_total = 0.0;  // lambda_reg * reg + lambda_cls * cls
  double reg = 0.0;
  double cls = 0.0;
  double local_total = 0.0;  // lambda_dist * dist + lambda_safe * safe + lambda_rl * rl
  double dist = 0.0;
  double safe = 0.0;
  double rl = 0.0;
  double J = 0.0;
};

/// Supervision targets of one training step: soft distance labels plus the
/// retrieved reference scores, both treated as constants by the gradient.
struct SceneTargets {
  std::vector<double> distance_labels;
  std::vector<SubMetricScores> retrieved;
};

inline LossBreakdown scene_loss_and_gradient(const PolicyState& state, const Scene& scene,
                                             const Trajectory& expert, const RewardTable& table,
                                             const LossWeights& weights, const MdpoConfig& mdpo_cfg,
                                             std::size_t step, std::uint64_t noise_seed,
                                             std::vector<double>* grad,
                                             const SceneTargets* fixed_targets = nullptr,
                                             SceneTargets* capture_targets = nullptr) {
  const PolicyConfig& cfg = state.config;
  const auto layout = detail::ParamLayout::of(cfg);
  if (grad && grad->size() != layout.total) grad->assign(layout.total, 0.0);

  const SceneFeatures feats = encode_scene(scene);
  const auto noised = noise_anchors(state, step, noise_seed);
  std::vector<detail::MlpCache> caches1;
  const auto proposals = stage1_propose(state, feats, noised, grad ? &caches1 : nullptr);

  const RegionLabels labels = region_labels(state.anchors, expert);
  LossBreakdown breakdown;
  Stage1Grad g1;
  breakdown.global_total = loss_global(proposals, expert, labels, weights, &breakdown.reg, &breakdown.cls,
                                       grad ? &g1 : nullptr);

  const auto selected_idx = select_topk(proposals, cfg.top_k);
  std::vector<Trajectory> selected;
  selected.reserve(selected_idx.size());
  for (std::size_t idx : selected_idx) selected.push_back(proposals[idx].trajectory);
  const auto candidates = expand_candidates(selected, cfg, derive_seed(noise_seed, "expand"));

  std::vector<detail::MlpCache> caches2;
  const auto outputs =
      stage2_refine(state, feats, candidates.trajectories, candidates.sources, grad ? &caches2 : nullptr);

  SceneTargets own_targets;
  const SceneTargets* targets = fixed_targets;
  if (targets == nullptr) {
    std::vector<Trajectory> refined;
    refined.reserve(outputs.size());
    for (const auto& o : outputs) refined.push_back(o.refined);
    own_targets.distance_labels = soft_distance_labels(refined, expert, cfg.beta);
    own_targets.retrieved.reserve(outputs.size());
    for (const auto& o : outputs) own_targets.retrieved.push_back(retrieve(table, o.refined).scores);
    targets = &own_targets;
  }
  if (targets->distance_labels.size() != outputs.size() || targets->retrieved.size() != outputs.size())
    throw std::invalid_argument("scene_loss_and_gradient: target sizes do not match the candidate count");
  if (capture_targets) *capture_targets = *targets;

  Stage2Grad g2;
  const LocalLossParts local = loss_local(outputs, targets->distance_labels, targets->retrieved,
                                          candidates.group_count, candidates.group_size, cfg, weights,
                                          mdpo_cfg, grad ? &g2 : nullptr);
  breakdown.dist = local.dist;
  breakdown.safe = local.safe;
  breakdown.rl = local.rl;
  breakdown.J = local.J;
  breakdown.local_total = local.total;
  breakdown.total = weights.lambda_global * breakdown.global_total + weights.lambda_local * breakdown.local_total;

  if (!grad) return breakdown;

  // Backward: stage 2 first, chaining candidate gradients through the
  // expansion maps onto the selected stage-1 outputs.
  const auto basis = detail::temporal_basis(cfg.horizon, cfg.delta_basis);
  std::vector<std::vector<double>> d_selected(selected.size(), std::vector<double>(layout.coords, 0.0));
  std::vector<double> d_safety(layout.metrics), d_rl(layout.metrics), d_candidate, d_rel;
  for (std::size_t j = 0; j < outputs.size(); ++j) {
    const double d_dist = weights.lambda_local * g2.d_dist_logit[j];
    for (std::size_t m = 0; m < layout.metrics; ++m) {
      d_safety[m] = weights.lambda_local * g2.d_safety[j][m];
      d_rl[m] = weights.lambda_local * g2.d_rl[j][m];
    }
    detail::stage2_backward(state, layout, caches2[j], d_dist, d_safety, d_rl, *grad, d_candidate, d_rel);

    // Candidate = M * source (plus any fixed offset); rel = candidate - source.
    // Chain both blocks onto the selected trajectory: M^T (dc + dr) - dr.
    const std::size_t k = j / candidates.group_size;
    const auto& map = candidates.maps[j];
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
      const double dx = d_candidate[2 * t] + d_rel[2 * t];
      const double dy = d_candidate[2 * t + 1] + d_rel[2 * t + 1];
      d_selected[k][2 * t] += map.a * dx + map.c * dy - d_rel[2 * t];
      d_selected[k][2 * t + 1] += map.b * dx + map.d * dy - d_rel[2 * t + 1];
    }
  }

  // Stage 1: intention-loss gradients on every proposal plus the chained
  // refinement gradients on the selected ones.
  std::vector<double> d_traj(layout.coords);
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    for (std::size_t c = 0; c < layout.coords; ++c) d_traj[c] = weights.lambda_global * g1.d_traj[j][c];
    const auto sel_it = std::find(selected_idx.begin(), selected_idx.end(), j);
    if (sel_it != selected_idx.end()) {
      const std::size_t k = static_cast<std::size_t>(sel_it - selected_idx.begin());
      for (std::size_t c = 0; c < layout.coords; ++c) d_traj[c] += d_selected[k][c];
    }
    const double d_logit = weights.lambda_global * g1.d_logit[j];
    detail::stage1_backward(state, layout, caches1[j], basis, feats, d_traj, d_logit, *grad);
  }

  return breakdown;
}

// ---------------------------------------------------------------------------
// Training loop: full-batch plain gradient descent, optionally with cosine
// step decay. Deterministic for a fixed seed.
// ---------------------------------------------------------------------------

struct TrainingExample {
  const Scene* scene = nullptr;
  const Trajectory* expert = nullptr;
  const RewardTable* table = nullptr;
};

enum class Optimizer : std::uint8_t { adam = 0, gd = 1 };

struct TrainOptions {
  std::size_t epochs = 80;
  std::size_t batch_size = 16;  // scenes per optimizer step; 0 = full batch
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 3e-3;
  bool cosine_decay = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;  // decoupled decay applied with the adam step
  double clip_norm = 0.0;  // global gradient-norm clip for plain gd; 0 disables
  std::uint64_t seed = 1;
  LossWeights loss_weights;
  MdpoConfig mdpo = MdpoConfig::defaults();
  bool log_epdms = true;
};

struct EpochLog {
  std::size_t epoch = 0;
  double l_global = 0.0;
  double l_dist = 0.0;
  double l_safe = 0.0;
  double l_rl = 0.0;
  double J = 0.0;
  double mean_epdms = 0.0;
  double total = 0.0;
};

/// EPDMS of a planned trajectory; plans that leave the grid window score 0.
inline double plan_epdms(const PolicyState& state, const Scene& scene, std::uint64_t seed,
                         const EvalParams& params = {}) {
  try {
    const SubMetricScores s = eval_submetrics(scene, plan(state, scene, seed), params);
    return aggregate_pdms(s, state.config.weights, PdmsVersion::v2);
  } catch (const std::out_of_range&) {
    return 0.0;
  }
}

inline std::vector<EpochLog> train(PolicyState& state, const std::vector<TrainingExample>& corpus,
                                   const TrainOptions& opts) {
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  state.config.validate();
  const auto layout = detail::ParamLayout::of(state.config);
  std::vector<EpochLog> logs;
  std::vector<double> grad(layout.total, 0.0);
  std::vector<double> adam_m, adam_v;
  if (opts.optimizer == Optimizer::adam) {
    adam_m.assign(layout.total, 0.0);
    adam_v.assign(layout.total, 0.0);
  }
  const double inv_n = 1.0 / static_cast<double>(corpus.size());
  const std::size_t batch = opts.batch_size == 0 ? corpus.size() : std::min(opts.batch_size, corpus.size());
  std::size_t adam_t = 0;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    // Deterministic shuffle per epoch.
    Rng shuffle_rng(derive_seed(derive_seed(opts.seed, "shuffle"), epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    double lr = opts.learning_rate;
    if (opts.cosine_decay && opts.epochs > 1)
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                  static_cast<double>(opts.epochs - 1)));

    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < corpus.size(); start += batch) {
      const std::size_t end = std::min(corpus.size(), start + batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t s = order[bi];
        const std::uint64_t scene_seed = derive_seed(derive_seed(opts.seed, epoch), s);
        const std::size_t step = 1 + static_cast<std::size_t>(derive_seed(scene_seed, "step") %
                                                              state.config.schedule.steps());
        const LossBreakdown b =
            scene_loss_and_gradient(state, *corpus[s].scene, *corpus[s].expert, *corpus[s].table,
                                    opts.loss_weights, opts.mdpo, step, derive_seed(scene_seed, "noise"),
                                    &grad);
        if (!std::isfinite(b.total))
          throw NumericalError("training loss became non-finite at epoch " + std::to_string(epoch) +
                               ", scene " + corpus[s].scene->id);
        log.l_global += b.global_total * inv_n;
        log.l_dist += b.dist * inv_n;
        log.l_safe += b.safe * inv_n;
        log.l_rl += b.rl * inv_n;
        log.J += b.J * inv_n;
        log.total += b.total * inv_n;
      }

      const double inv_b = 1.0 / static_cast<double>(end - start);
      if (opts.optimizer == Optimizer::adam) {
        ++adam_t;
        const double bias1 = 1.0 - std::pow(opts.adam_beta1, static_cast<double>(adam_t));
        const double bias2 = 1.0 - std::pow(opts.adam_beta2, static_cast<double>(adam_t));
        for (std::size_t i = 0; i < layout.total; ++i) {
          const double g = grad[i] * inv_b;
          adam_m[i] = opts.adam_beta1 * adam_m[i] + (1.0 - opts.adam_beta1) * g;
          adam_v[i] = opts.adam_beta2 * adam_v[i] + (1.0 - opts.adam_beta2) * g * g;
          state.params[i] -= lr * ((adam_m[i] / bias1) / (std::sqrt(adam_v[i] / bias2) + opts.adam_eps) +
                                   opts.weight_decay * state.params[i]);
        }
      } else {
        double scale = inv_b;
        if (opts.clip_norm > 0.0) {
          double norm_sq = 0.0;
          for (std::size_t i = 0; i < layout.total; ++i) norm_sq += grad[i] * grad[i] * inv_b * inv_b;
          const double gnorm = std::sqrt(norm_sq);
          if (gnorm > opts.clip_norm) scale *= opts.clip_norm / gnorm;
        }
        for (std::size_t i = 0; i < layout.total; ++i) state.params[i] -= lr * grad[i] * scale;
      }
    }

    if (opts.log_epdms) {
      double sum = 0.0;
      for (std::size_t s = 0; s < corpus.size(); ++s)
        sum += plan_epdms(state, *corpus[s].scene, derive_seed(opts.seed, derive_seed(s, "eval")));
      log.mean_epdms = sum * inv_n;
    }
    logs.push_back(log);
  }
  return logs;
}

}  // namespace trajkit
