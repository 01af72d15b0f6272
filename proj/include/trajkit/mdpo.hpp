// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajkit {

/// Metric-decoupled policy optimization: each metric gets its own softmax
/// selection distribution over an expansion group and its own z-normalized
/// reward; the objective is the coefficient-weighted sum of the expected
/// normalized rewards, averaged over groups.

struct MdpoConfig {
  std::vector<std::string> metrics;
  std::vector<double> coeffs;  // alpha per metric, same order
  double epsilon = 1e-6;       // std smoothing in the reward normalization

  /// Default metric set and coefficients: the driving safety metrics with
  /// their score-fusion weights, normalized to sum 1.
  static MdpoConfig defaults() {
    MdpoConfig cfg;
    cfg.metrics = {"nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc"};
    cfg.coeffs = {0.5, 0.5, 0.3, 0.1, 5.0, 5.0, 2.0, 1.0};
    double total = 0.0;
    for (double c : cfg.coeffs) total += c;
    for (double& c : cfg.coeffs) c /= total;
    return cfg;
  }

  std::size_t metric_count() const { return metrics.size(); }

  std::size_t metric_index(const std::string& name) const {
    for (std::size_t i = 0; i < metrics.size(); ++i)
      if (metrics[i] == name) return i;
    throw std::invalid_argument("mdpo: unknown metric: " + name);
  }

  void validate() const {
    if (metrics.empty() || metrics.size() != coeffs.size())
      throw std::invalid_argument("mdpo config: metric/coefficient size mismatch");
    bool any = false;
    for (double c : coeffs) {
      if (c < 0.0) throw std::invalid_argument("mdpo config: coefficients must be >= 0");
      if (c > 0.0) any = true;
    }
    if (!any) throw std::invalid_argument("mdpo config: at least one coefficient must be positive");
    if (!(epsilon > 0.0)) throw std::invalid_argument("mdpo config: epsilon must be positive");
  }
};

/// One expansion set: the trajectories derived from a single selected
/// intention, with per-trajectory per-metric RL logits and raw rewards.
/// Row-major layout, one row per trajectory.
struct ExpansionGroup {
  std::vector<std::size_t> indices;  // original candidate indices, audit only
  std::size_t count = 0;
  std::size_t metric_count = 0;
  std::vector<double> logits;   // count x metric_count
  std::vector<double> rewards;  // count x metric_count

  double logit(std::size_t j, std::size_t m) const { return logits[j * metric_count + m]; }
  double reward(std::size_t j, std::size_t m) const { return rewards[j * metric_count + m]; }

  void validate() const {
    if (count == 0) throw std::invalid_argument("expansion group: empty");
    if (logits.size() != count * metric_count || rewards.size() != count * metric_count)
      throw std::invalid_argument("expansion group: buffer sizes do not match count x metrics");
  }
};

/// Softmax of one metric's logits over the group.
inline std::vector<double> selection_probabilities(const ExpansionGroup& group, std::size_t metric) {
  group.validate();
  if (metric >= group.metric_count) throw std::invalid_argument("mdpo: metric index out of range");
  double max_logit = -1e300;
  for (std::size_t j = 0; j < group.count; ++j) max_logit = std::max(max_logit, group.logit(j, metric));
  std::vector<double> p(group.count);
  double sum = 0.0;
  for (std::size_t j = 0; j < group.count; ++j) {
    p[j] = std::exp(group.logit(j, metric) - max_logit);
    sum += p[j];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline std::vector<double> selection_probabilities(const ExpansionGroup& group, const MdpoConfig& cfg,
                                                   const std::string& metric) {
  return selection_probabilities(group, cfg.metric_index(metric));
}

/// (r - mean) / (population std + epsilon), elementwise over the group.
/// An all-equal group normalizes to exact zeros.
inline std::vector<double> normalize_rewards(const ExpansionGroup& group, std::size_t metric,
                                             const MdpoConfig& cfg) {
  group.validate();
  if (metric >= group.metric_count) throw std::invalid_argument("mdpo: metric index out of range");
  bool all_equal = true;
  for (std::size_t j = 1; j < group.count && all_equal; ++j)
    all_equal = group.reward(j, metric) == group.reward(0, metric);
  if (all_equal) return std::vector<double>(group.count, 0.0);
  const double n = static_cast<double>(group.count);
  double mean = 0.0;
  for (std::size_t j = 0; j < group.count; ++j) mean += group.reward(j, metric);
  mean /= n;
  double var = 0.0;
  for (std::size_t j = 0; j < group.count; ++j) {
    const double d = group.reward(j, metric) - mean;
    var += d * d;
  }
  const double stddev = std::sqrt(var / n);
  std::vector<double> out(group.count);
  for (std::size_t j = 0; j < group.count; ++j)
    out[j] = (group.reward(j, metric) - mean) / (stddev + cfg.epsilon);
  return out;
}

inline std::vector<double> normalize_rewards(const ExpansionGroup& group, const MdpoConfig& cfg,
                                             const std::string& metric) {
  return normalize_rewards(group, cfg.metric_index(metric), cfg);
}

/// J_k = sum_m alpha_m * sum_j p_j r̄_j for one group.
inline double group_objective(const ExpansionGroup& group, const MdpoConfig& cfg) {
  cfg.validate();
  group.validate();
  if (group.metric_count != cfg.metric_count())
    throw std::invalid_argument("mdpo: group metric count does not match config");
  double J = 0.0;
  for (std::size_t m = 0; m < cfg.metric_count(); ++m) {
    if (cfg.coeffs[m] == 0.0) continue;
    const auto p = selection_probabilities(group, m);
    const auto r = normalize_rewards(group, m, cfg);
    double expected = 0.0;
    for (std::size_t j = 0; j < group.count; ++j) expected += p[j] * r[j];
    J += cfg.coeffs[m] * expected;
  }
  return J;
}

/// Mean of the group objectives.
inline double total_objective(const std::vector<ExpansionGroup>& groups, const MdpoConfig& cfg) {
  if (groups.empty()) throw std::invalid_argument("mdpo: empty group list");
  double sum = 0.0;
  for (const ExpansionGroup& g : groups) sum += group_objective(g, cfg);
  return sum / static_cast<double>(groups.size());
}

/// dJ/dlogit, one matrix per group, same layout as the group logits.
/// Rewards are treated as constants: they come out of the cache lookup and
/// carry no gradient.
inline std::vector<std::vector<double>> objective_gradient(const std::vector<ExpansionGroup>& groups,
                                                           const MdpoConfig& cfg) {
  if (groups.empty()) throw std::invalid_argument("mdpo: empty group list");
  cfg.validate();
  const double K = static_cast<double>(groups.size());
  std::vector<std::vector<double>> grads;
  grads.reserve(groups.size());
  for (const ExpansionGroup& g : groups) {
    g.validate();
    std::vector<double> grad(g.count * g.metric_count, 0.0);
    for (std::size_t m = 0; m < cfg.metric_count(); ++m) {
      if (cfg.coeffs[m] == 0.0) continue;
      const auto p = selection_probabilities(g, m);
      const auto r = normalize_rewards(g, m, cfg);
      double expected = 0.0;
      for (std::size_t j = 0; j < g.count; ++j) expected += p[j] * r[j];
      for (std::size_t j = 0; j < g.count; ++j)
        grad[j * g.metric_count + m] = (cfg.coeffs[m] / K) * p[j] * (r[j] - expected);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

inline double rl_loss(const std::vector<ExpansionGroup>& groups, const MdpoConfig& cfg) {
  return -total_objective(groups, cfg);
}

inline std::vector<std::vector<double>> rl_loss_gradient(const std::vector<ExpansionGroup>& groups,
                                                         const MdpoConfig& cfg) {
  auto grads = objective_gradient(groups, cfg);
  for (auto& g : grads)
    for (double& v : g) v = -v;
  return grads;
}

}  // namespace trajkit
