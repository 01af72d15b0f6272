// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace trajkit {

/// Exact nearest-neighbor index over flattened trajectories. Points are
/// 2T-dimensional (x0, y0, x1, y1, ...) and the query metric is the mean
/// per-waypoint Euclidean distance, identical term order to
/// trajectory_distance so the two routes agree bitwise. Ties resolve to the
/// lowest row index.
///
/// Median splits on the widest bounding dimension; queries descend by split
/// plane and test far subtrees on the way back, first against the cheap
/// plane-distance bound, then against the subtree's bounding box. Leaf points
/// are stored contiguously and scanned with running-sum early exit.
class TrajectoryKdTree {
 public:
  TrajectoryKdTree() = default;

  TrajectoryKdTree(std::vector<double> points, std::size_t dim) : dim_(dim) {
    if (dim_ == 0 || dim_ % 2 != 0) throw std::invalid_argument("kd-tree: dimension must be a positive multiple of 2");
    if (points.size() % dim_ != 0) throw std::invalid_argument("kd-tree: point buffer size not a multiple of dim");
    count_ = points.size() / dim_;
    if (count_ == 0) return;
    order_.resize(count_);
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    nodes_.reserve(2 * count_ / kLeafSize + 2);
    build(points, 0, static_cast<std::uint32_t>(count_));
    // Re-pack points in leaf order so leaf scans are contiguous.
    packed_.resize(points.size());
    for (std::size_t slot = 0; slot < count_; ++slot)
      std::copy_n(points.data() + order_[slot] * dim_, dim_, packed_.data() + slot * dim_);
  }

  std::size_t size() const { return count_; }
  std::size_t dim() const { return dim_; }

  struct Result {
    std::size_t index = std::numeric_limits<std::size_t>::max();
    double distance = std::numeric_limits<double>::infinity();
  };

  Result nearest(const double* query) const {
    if (count_ == 0) throw std::logic_error("kd-tree: nearest() on empty index");
    Result best;
    search(0, query, best);
    return best;
  }

 private:
  static constexpr std::uint32_t kLeafSize = 8;
  static constexpr std::uint32_t kNoChild = 0xffffffffu;

  struct Node {
    std::uint32_t begin = 0, end = 0;  // slot range; leaves scan packed_ directly
    std::uint32_t left = kNoChild, right = kNoChild;
    std::uint32_t split_dim = 0;
    double split_value = 0.0;
    std::size_t box = 0;  // offset into boxes_: dim_ lows then dim_ highs
  };

  std::uint32_t build(const std::vector<double>& pts, std::uint32_t begin, std::uint32_t end) {
    const auto node_id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    {
      Node& n = nodes_.back();
      n.begin = begin;
      n.end = end;
      n.box = boxes_.size();
      boxes_.resize(boxes_.size() + 2 * dim_);
      double* lo = boxes_.data() + n.box;
      double* hi = lo + dim_;
      std::fill_n(lo, dim_, std::numeric_limits<double>::infinity());
      std::fill_n(hi, dim_, -std::numeric_limits<double>::infinity());
      for (std::uint32_t i = begin; i < end; ++i) {
        const double* p = pts.data() + order_[i] * dim_;
        for (std::size_t d = 0; d < dim_; ++d) {
          lo[d] = std::min(lo[d], p[d]);
          hi[d] = std::max(hi[d], p[d]);
        }
      }
    }
    if (end - begin <= kLeafSize) return node_id;

    std::size_t split_dim = 0;
    double widest = -1.0;
    for (std::size_t d = 0; d < dim_; ++d) {
      const double spread =
          boxes_[nodes_[node_id].box + dim_ + d] - boxes_[nodes_[node_id].box + d];
      if (spread > widest) {
        widest = spread;
        split_dim = d;
      }
    }
    if (!(widest > 0.0)) return node_id;  // all points identical; keep as leaf

    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       const double va = pts[a * dim_ + split_dim], vb = pts[b * dim_ + split_dim];
                       return va < vb || (va == vb && a < b);
                     });
    nodes_[node_id].split_dim = static_cast<std::uint32_t>(split_dim);
    nodes_[node_id].split_value = pts[order_[mid] * dim_ + split_dim];
    const std::uint32_t left = build(pts, begin, mid);
    const std::uint32_t right = build(pts, mid, end);
    nodes_[node_id].left = left;
    nodes_[node_id].right = right;
    return node_id;
  }

  // True as soon as the lower bound on the mean per-waypoint distance from
  // the query to the node box exceeds the threshold.
  bool box_excludes(const Node& n, const double* q, double threshold) const {
    const double* lo = boxes_.data() + n.box;
    const double* hi = lo + dim_;
    const double limit = threshold * (static_cast<double>(dim_) / 2.0);
    double sum = 0.0;
    for (std::size_t d = 0; d < dim_; d += 2) {
      const double lx = lo[d] - q[d];
      const double hx = q[d] - hi[d];
      const double dx = lx > 0.0 ? lx : (hx > 0.0 ? hx : 0.0);
      const double ly = lo[d + 1] - q[d + 1];
      const double hy = q[d + 1] - hi[d + 1];
      const double dy = ly > 0.0 ? ly : (hy > 0.0 ? hy : 0.0);
      sum += std::sqrt(dx * dx + dy * dy);
      if (sum > limit) return true;
    }
    return false;
  }

  void scan_leaf(const Node& n, const double* q, Result& best) const {
    const double waypoints = static_cast<double>(dim_) / 2.0;
    const double* p = packed_.data() + n.begin * dim_;
    for (std::uint32_t slot = n.begin; slot < n.end; ++slot, p += dim_) {
      double sum = 0.0;
      bool pruned = false;
      for (std::size_t d = 0; d < dim_; d += 2) {
        const double dx = q[d] - p[d];
        const double dy = q[d + 1] - p[d + 1];
        sum += std::sqrt(dx * dx + dy * dy);
        if (sum / waypoints > best.distance) {
          pruned = true;
          break;
        }
      }
      if (pruned) continue;
      const double dist = sum / waypoints;
      const std::size_t row = order_[slot];
      if (dist < best.distance || (dist == best.distance && row < best.index)) {
        best.distance = dist;
        best.index = row;
      }
    }
  }

  void search(std::uint32_t node_id, const double* q, Result& best) const {
    const Node& n = nodes_[node_id];
    if (n.left == kNoChild) {
      scan_leaf(n, q, best);
      return;
    }
    const double plane_gap = q[n.split_dim] - n.split_value;
    const std::uint32_t near = plane_gap <= 0.0 ? n.left : n.right;
    const std::uint32_t far = plane_gap <= 0.0 ? n.right : n.left;
    search(near, q, best);
    // One coordinate's gap alone already lower-bounds the mean distance.
    if (std::abs(plane_gap) / (static_cast<double>(dim_) / 2.0) > best.distance) return;
    if (box_excludes(nodes_[far], q, best.distance)) return;
    search(far, q, best);
  }

  std::size_t dim_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint32_t> order_;  // slot -> original row
  std::vector<double> packed_;        // points in slot order
  std::vector<double> boxes_;         // per node: dim_ lows then dim_ highs
  std::vector<Node> nodes_;
};

}  // namespace trajkit
