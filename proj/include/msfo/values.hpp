#pragma once

// State blocks addressed by (kind, key) and the solver index layout over them.

#include <Eigen/Core>

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "msfo/errors.hpp"
#include "msfo/manifold.hpp"

namespace msfo {

/// Declaration order fixes the solver ordering: inverse depths go last so the
/// landmark part of the normal equations is a trailing diagonal block.
enum class BlockKind : std::uint8_t { Pose = 0, SpeedBias = 1, Vector = 2, InverseDepth = 3 };

struct BlockId {
  BlockKind kind = BlockKind::Pose;
  std::int64_t key = 0;

  auto operator<=>(const BlockId&) const = default;

  static BlockId pose(std::int64_t k) { return {BlockKind::Pose, k}; }
  static BlockId speed_bias(std::int64_t k) { return {BlockKind::SpeedBias, k}; }
  static BlockId inv_depth(std::int64_t k) { return {BlockKind::InverseDepth, k}; }
  static BlockId vector(std::int64_t k) { return {BlockKind::Vector, k}; }
};

inline std::string to_string(const BlockId& id) {
  static const char* names[] = {"pose", "speed_bias", "vector", "inv_depth"};
  return std::string(names[static_cast<int>(id.kind)]) + "#" + std::to_string(id.key);
}

class Values {
 public:
  std::map<std::int64_t, Pose> poses;
  std::map<std::int64_t, Vec9> speed_biases;
  std::map<std::int64_t, double> inv_depths;
  std::map<std::int64_t, Eigen::VectorXd> vectors;

  bool contains(const BlockId& id) const {
    switch (id.kind) {
      case BlockKind::Pose: return poses.count(id.key) > 0;
      case BlockKind::SpeedBias: return speed_biases.count(id.key) > 0;
      case BlockKind::InverseDepth: return inv_depths.count(id.key) > 0;
      case BlockKind::Vector: return vectors.count(id.key) > 0;
    }
    return false;
  }

  int dim(const BlockId& id) const {
    switch (id.kind) {
      case BlockKind::Pose: return 6;
      case BlockKind::SpeedBias: return 9;
      case BlockKind::InverseDepth: return 1;
      case BlockKind::Vector: return static_cast<int>(at_vector(id.key).size());
    }
    return 0;
  }

  const Pose& pose(std::int64_t k) const { return at(poses, k, "pose"); }
  const Vec9& speed_bias(std::int64_t k) const { return at(speed_biases, k, "speed_bias"); }
  double inv_depth(std::int64_t k) const { return at(inv_depths, k, "inv_depth"); }
  const Eigen::VectorXd& vector(std::int64_t k) const { return at_vector(k); }

  /// In-place x <- x [+] delta for one block.
  void boxplus_block(const BlockId& id, const Eigen::Ref<const Eigen::VectorXd>& delta) {
    if (delta.size() != dim(id)) throw ContractError("boxplus: tangent dimension mismatch for " + to_string(id));
    switch (id.kind) {
      case BlockKind::Pose: {
        Pose& x = poses.at(id.key);
        x = boxplus(x, Vec6(delta));
        break;
      }
      case BlockKind::SpeedBias: speed_biases.at(id.key) += delta; break;
      case BlockKind::InverseDepth: inv_depths.at(id.key) += delta[0]; break;
      case BlockKind::Vector: vectors.at(id.key) += delta; break;
    }
  }

  /// this[id] [-] other[id]
  Eigen::VectorXd boxminus_block(const BlockId& id, const Values& other) const {
    switch (id.kind) {
      case BlockKind::Pose: return boxminus(pose(id.key), other.pose(id.key));
      case BlockKind::SpeedBias: return speed_bias(id.key) - other.speed_bias(id.key);
      case BlockKind::InverseDepth: return Eigen::VectorXd::Constant(1, inv_depth(id.key) - other.inv_depth(id.key));
      case BlockKind::Vector: return vector(id.key) - other.vector(id.key);
    }
    return {};
  }

  void copy_block(const BlockId& id, const Values& from) {
    switch (id.kind) {
      case BlockKind::Pose: poses[id.key] = from.pose(id.key); break;
      case BlockKind::SpeedBias: speed_biases[id.key] = from.speed_bias(id.key); break;
      case BlockKind::InverseDepth: inv_depths[id.key] = from.inv_depth(id.key); break;
      case BlockKind::Vector: vectors[id.key] = from.vector(id.key); break;
    }
  }

 private:
  template <class M>
  static const typename M::mapped_type& at(const M& m, std::int64_t k, const char* what) {
    auto it = m.find(k);
    if (it == m.end()) throw ContractError(std::string("values: missing ") + what + " block " + std::to_string(k));
    return it->second;
  }
  const Eigen::VectorXd& at_vector(std::int64_t k) const { return at(vectors, k, "vector"); }
};

struct LayoutEntry {
  BlockId id;
  int offset = 0;
  int dim = 0;
};

/// Ordered map from state block to solver columns.
class Layout {
 public:
  Layout() = default;

  /// Blocks are ordered by BlockId, which puts inverse depths last.
  Layout(const std::vector<BlockId>& ids, const Values& values) {
    std::vector<BlockId> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (const BlockId& id : sorted) {
      if (!values.contains(id)) throw ContractError("layout: no value for block " + to_string(id));
      if (id.kind == BlockKind::InverseDepth && landmark_begin_ < 0) landmark_begin_ = total_;
      LayoutEntry e{id, total_, values.dim(id)};
      index_[id] = static_cast<int>(entries_.size());
      entries_.push_back(e);
      total_ += e.dim;
    }
    if (landmark_begin_ < 0) landmark_begin_ = total_;
  }

  int total_dim() const { return total_; }
  /// Column where the scalar inverse-depth blocks start (== total_dim() if none).
  int landmark_begin() const { return landmark_begin_; }
  const std::vector<LayoutEntry>& entries() const { return entries_; }
  bool contains(const BlockId& id) const { return index_.count(id) > 0; }

  const LayoutEntry& entry(const BlockId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("layout: block not present " + to_string(id));
    return entries_[it->second];
  }

  /// values [+] delta over every block of the layout.
  Values retract(const Values& values, const Eigen::VectorXd& delta) const {
    if (delta.size() != total_) throw ContractError("layout: update has the wrong dimension");
    Values out = values;
    for (const auto& e : entries_) out.boxplus_block(e.id, delta.segment(e.offset, e.dim));
    return out;
  }

 private:
  std::vector<LayoutEntry> entries_;
  std::map<BlockId, int> index_;
  int total_ = 0;
  int landmark_begin_ = -1;
};

}  // namespace msfo
