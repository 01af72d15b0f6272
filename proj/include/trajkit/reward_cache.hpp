// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "trajkit/binio.hpp"
#include "trajkit/geometry.hpp"
#include "trajkit/kdtree.hpp"
#include "trajkit/metrics.hpp"
#include "trajkit/scene.hpp"

namespace trajkit {

/// Generation grid for the reference vocabulary: constant-curvature arcs
/// parameterized by cruise speed and total heading change over the horizon
/// (the per-entry curvature is turn / (speed * horizon)).
struct VocabularySpec {
  std::size_t horizon = 8;
  double timestep_s = 0.5;
  double min_speed = 0.5;
  double max_speed = 13.0;
  double max_turn = std::numbers::pi / 4.0;
};

struct AnchorVocabulary {
  VocabularySpec spec;
  std::vector<Trajectory> trajectories;

  std::size_t size() const { return trajectories.size(); }
  std::size_t horizon() const { return trajectories.empty() ? 0 : trajectories.front().size(); }
};

namespace detail {

inline double linspace_at(double lo, double hi, std::size_t i, std::size_t count) {
  if (count <= 1) return 0.5 * (lo + hi);
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
}

inline Trajectory arc_trajectory(double speed, double total_turn, std::size_t horizon, double dt) {
  Trajectory traj;
  traj.timestep_s = dt;
  const double horizon_s = static_cast<double>(horizon) * dt;
  const double curvature = total_turn / std::max(1e-9, speed * horizon_s);
  for (std::size_t i = 0; i < horizon; ++i) {
    const double s = speed * static_cast<double>(i + 1) * dt;
    if (std::abs(curvature) < 1e-9) {
      traj.waypoints.push_back({s, 0.0});
    } else {
      traj.waypoints.push_back({std::sin(curvature * s) / curvature, (1.0 - std::cos(curvature * s)) / curvature});
    }
  }
  return traj;
}

}  // namespace detail

/// Deterministic (speed x turn) grid sampled to exactly n entries.
inline AnchorVocabulary build_vocabulary(const VocabularySpec& spec, std::size_t n) {
  if (n < 1) throw std::invalid_argument("build_vocabulary: n must be >= 1");
  if (spec.horizon < 2) throw std::invalid_argument("build_vocabulary: horizon must be >= 2");
  AnchorVocabulary vocab;
  vocab.spec = spec;
  vocab.trajectories.reserve(n);
  const auto n_speed = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  const std::size_t speeds = std::max<std::size_t>(1, n_speed);
  const std::size_t turns = (n + speeds - 1) / speeds;
  for (std::size_t si = 0; si < speeds && vocab.trajectories.size() < n; ++si) {
    const double v = detail::linspace_at(spec.min_speed, spec.max_speed, si, speeds);
    for (std::size_t ti = 0; ti < turns && vocab.trajectories.size() < n; ++ti) {
      const double turn = detail::linspace_at(-spec.max_turn, spec.max_turn, ti, turns);
      vocab.trajectories.push_back(detail::arc_trajectory(v, turn, spec.horizon, spec.timestep_s));
    }
  }
  return vocab;
}

/// Immutable per-scene store of precomputed sub-metric scores over a
/// vocabulary, plus an exact spatial index over the flattened trajectories.
/// Safe for unrestricted concurrent reads once built. The scene association
/// is carried by the cache filename (<scene_id>.trrc); the file format itself
/// holds only the vocabulary block and score matrix.
struct RewardTable {
  std::string scene_id;
  std::vector<std::string> metric_names;
  std::size_t rows = 0;
  std::size_t horizon = 0;
  std::vector<double> anchor_coords;  // rows x 2*horizon
  std::vector<double> scores;         // rows x metric_names.size()
  TrajectoryKdTree index;

  std::size_t metric_count() const { return metric_names.size(); }

  double score_at(std::size_t row, std::size_t metric) const { return scores[row * metric_count() + metric]; }

  SubMetricScores submetrics_at(std::size_t row) const {
    if (metric_names.size() != SubMetricScores::kCount)
      throw std::logic_error("reward table does not hold the full sub-metric set");
    SubMetricScores s;
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) s.set(m, score_at(row, m));
    return s;
  }

  void rebuild_index() { index = TrajectoryKdTree(anchor_coords, 2 * horizon); }
};

inline std::vector<double> flatten_trajectory(const Trajectory& traj) {
  std::vector<double> flat;
  flat.reserve(2 * traj.size());
  for (Vec2 w : traj.waypoints) {
    flat.push_back(w.x);
    flat.push_back(w.y);
  }
  return flat;
}

/// Evaluate every vocabulary entry against the scene. Rows are independent,
/// so the work is chunked over threads; the result is bit-identical for any
/// thread count.
inline RewardTable precompute_rewards(const Scene& scene, const AnchorVocabulary& vocab,
                                      std::size_t thread_count = 0, const EvalParams& params = {}) {
  if (vocab.size() == 0) throw std::invalid_argument("precompute_rewards: empty vocabulary");
  RewardTable table;
  table.scene_id = scene.id;
  const auto& names = SubMetricScores::names();
  table.metric_names.assign(names.begin(), names.end());
  table.rows = vocab.size();
  table.horizon = vocab.horizon();
  table.anchor_coords.resize(table.rows * 2 * table.horizon);
  table.scores.resize(table.rows * table.metric_count());

  for (std::size_t j = 0; j < vocab.size(); ++j) {
    const auto flat = flatten_trajectory(vocab.trajectories[j]);
    std::copy(flat.begin(), flat.end(), table.anchor_coords.begin() + static_cast<std::ptrdiff_t>(j * flat.size()));
  }

  auto eval_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      const SubMetricScores s = eval_submetrics(scene, vocab.trajectories[j], params);
      for (std::size_t m = 0; m < SubMetricScores::kCount; ++m)
        table.scores[j * table.metric_count() + m] = s.get(m);
    }
  };

  std::size_t workers = thread_count == 0 ? std::max(1u, std::thread::hardware_concurrency()) : thread_count;
  workers = std::min<std::size_t>(workers, table.rows);
  if (workers <= 1) {
    eval_range(0, table.rows);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (table.rows + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(table.rows, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(eval_range, begin, end);
    }
    for (auto& t : pool) t.join();
  }

  table.rebuild_index();
  return table;
}

struct RetrievalResult {
  SubMetricScores scores;
  std::size_t matched_index = 0;
  double distance = 0.0;
};

/// Nearest-neighbor reward lookup; ties resolve to the lowest row.
inline RetrievalResult retrieve(const RewardTable& table, const Trajectory& query) {
  if (query.size() != table.horizon)
    throw std::invalid_argument("retrieve: query waypoint count does not match the vocabulary");
  thread_local std::vector<double> scratch;
  scratch.clear();
  for (Vec2 w : query.waypoints) {
    scratch.push_back(w.x);
    scratch.push_back(w.y);
  }
  const auto hit = table.index.nearest(scratch.data());
  return {table.submetrics_at(hit.index), hit.index, hit.distance};
}

inline RetrievalResult retrieve(const RewardTable& table, const AnchorVocabulary& vocab,
                                const Trajectory& query) {
  if (vocab.size() != table.rows) throw std::invalid_argument("retrieve: vocabulary/table size mismatch");
  return retrieve(table, query);
}

struct RetrievalErrorReport {
  std::vector<std::string> metric_names;
  std::vector<double> mean_abs_error;     // per metric
  std::vector<double> disagreement_rate;  // per metric, |diff| > 1e-9
  std::vector<double> nn_distance;        // per query
  std::size_t query_count = 0;
};

/// Quantifies the retrieval approximation against direct evaluation.
inline RetrievalErrorReport retrieval_error_report(const Scene& scene, const RewardTable& table,
                                                   const std::vector<Trajectory>& queries,
                                                   const EvalParams& params = {}) {
  RetrievalErrorReport report;
  report.metric_names = table.metric_names;
  report.mean_abs_error.assign(table.metric_count(), 0.0);
  report.disagreement_rate.assign(table.metric_count(), 0.0);
  report.query_count = queries.size();
  for (const Trajectory& q : queries) {
    const RetrievalResult hit = retrieve(table, q);
    const SubMetricScores direct = eval_submetrics(scene, q, params);
    report.nn_distance.push_back(hit.distance);
    for (std::size_t m = 0; m < table.metric_count(); ++m) {
      const double diff = std::abs(hit.scores.get(m) - direct.get(m));
      report.mean_abs_error[m] += diff;
      if (diff > 1e-9) report.disagreement_rate[m] += 1.0;
    }
  }
  if (!queries.empty()) {
    for (std::size_t m = 0; m < table.metric_count(); ++m) {
      report.mean_abs_error[m] /= static_cast<double>(queries.size());
      report.disagreement_rate[m] /= static_cast<double>(queries.size());
    }
  }
  return report;
}

struct RetrievalBenchmark {
  double mean_retrieve_s = 0.0;
  double mean_oracle_s = 0.0;
  double speedup = 0.0;
  std::size_t query_count = 0;
  double checksum = 0.0;  // keeps the timed loops live; sum of matched rows
};

/// Wall-clock comparison of cache lookup vs direct simulation per query.
/// Each side is timed over the full query list several times and the best
/// repetition kept, which filters scheduler noise out of the ratio.
inline RetrievalBenchmark bench_retrieval(const Scene& scene, const RewardTable& table,
                                          const std::vector<Trajectory>& queries,
                                          const EvalParams& params = {}, std::size_t repetitions = 3) {
  if (queries.size() < 100) throw std::invalid_argument("bench_retrieval: need at least 100 queries");
  if (repetitions < 1) throw std::invalid_argument("bench_retrieval: need at least one repetition");
  RetrievalBenchmark bench;
  bench.query_count = queries.size();
  const double n = static_cast<double>(queries.size());

  using clock = std::chrono::steady_clock;
  double best_retrieve = std::numeric_limits<double>::infinity();
  double best_oracle = std::numeric_limits<double>::infinity();
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    const auto t0 = clock::now();
    for (const Trajectory& q : queries) bench.checksum += static_cast<double>(retrieve(table, q).matched_index);
    const auto t1 = clock::now();
    for (const Trajectory& q : queries) bench.checksum += eval_submetrics(scene, q, params).ep;
    const auto t2 = clock::now();
    best_retrieve = std::min(best_retrieve, std::chrono::duration<double>(t1 - t0).count() / n);
    best_oracle = std::min(best_oracle, std::chrono::duration<double>(t2 - t1).count() / n);
  }

  bench.mean_retrieve_s = best_retrieve;
  bench.mean_oracle_s = best_oracle;
  bench.speedup = bench.mean_oracle_s / std::max(1e-12, bench.mean_retrieve_s);
  return bench;
}

// ---------------------------------------------------------------------------
// Cache file format: little-endian, magic "TRRC", u32 version, u32 N, u32 T,
// u32 metric count, length-prefixed UTF-8 metric names, N x 2T f64 trajectory
// block, N x metric-count f64 score block, CRC32 trailer over all prior bytes.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCacheVersion = 1;

inline void save_table(const RewardTable& table, const std::string& path) {
  std::vector<std::uint8_t> buf;
  buf.reserve(24 + table.anchor_coords.size() * 8 + table.scores.size() * 8);
  buf.push_back('T');
  buf.push_back('R');
  buf.push_back('R');
  buf.push_back('C');
  detail::put_u32(buf, kCacheVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(table.rows));
  detail::put_u32(buf, static_cast<std::uint32_t>(table.horizon));
  detail::put_u32(buf, static_cast<std::uint32_t>(table.metric_count()));
  for (const std::string& name : table.metric_names) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
  }
  for (double v : table.anchor_coords) detail::put_f64(buf, v);
  for (double v : table.scores) detail::put_f64(buf, v);
  detail::put_u32(buf, detail::crc32(buf.data(), buf.size()));
  detail::write_file(path, buf);
}

inline RewardTable load_table(const std::string& path) {
  const std::vector<std::uint8_t> buf = detail::read_file(path);
  if (buf.size() < 24) throw FormatError("reward cache file truncated: " + path);
  const std::uint32_t stored_crc =
      static_cast<std::uint32_t>(buf[buf.size() - 4]) | (static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8) |
      (static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16) |
      (static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24);
  if (detail::crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw FormatError("reward cache checksum mismatch: " + path);

  detail::ByteReader reader(buf.data(), buf.size() - 4);
  if (reader.bytes(4) != "TRRC") throw FormatError("reward cache bad magic: " + path);
  const std::uint32_t version = reader.u32();
  if (version != kCacheVersion) throw FormatError("reward cache unsupported version: " + path);

  RewardTable table;
  table.rows = reader.u32();
  table.horizon = reader.u32();
  const std::uint32_t metric_count = reader.u32();
  for (std::uint32_t m = 0; m < metric_count; ++m) {
    const std::uint32_t len = reader.u32();
    table.metric_names.push_back(reader.bytes(len));
  }
  table.anchor_coords.resize(table.rows * 2 * table.horizon);
  for (double& v : table.anchor_coords) v = reader.f64();
  table.scores.resize(table.rows * metric_count);
  for (double& v : table.scores) v = reader.f64();
  if (reader.remaining() != 0) throw FormatError("reward cache trailing bytes: " + path);

  table.scene_id = std::filesystem::path(path).stem().string();
  table.rebuild_index();
  return table;
}

}  // namespace trajkit
