#pragma once

#include "magnaforge/blockset.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace magnaforge {

struct WorldState;
struct EnvConfig;

// Edge feature layout (A -> B, expressed in A's frame).
namespace edge_feature {
inline constexpr int magnet_dp = 0;     // 3: move that brings the blueprint magnets together
inline constexpr int magnet_dq = 3;     // 6: rotation aligning the magnet axes, 6d code minus identity
inline constexpr int blueprint_dp = 9;  // 3: live minus blueprint relative position
inline constexpr int blueprint_dq = 12; // 6: rotation to the blueprint relative orientation, minus identity
inline constexpr int com_dp = 18;       // 3: center-of-mass offset
inline constexpr int should_connect = 21;
inline constexpr int is_connected = 22;
inline constexpr int width = 23;
}  // namespace edge_feature

// Per-gripper global layout: world-up in the held block's frame (3), executed linear
// and angular velocity (3 + 3), then a held one-hot over blocks plus a "nothing" slot.
namespace global_feature {
inline constexpr int up = 0;
inline constexpr int linear_velocity = 3;
inline constexpr int angular_velocity = 6;
inline constexpr int held = 9;
inline constexpr int invariant_width = 10;  // up, velocities, holds-nothing flag
inline constexpr int width(int n_blocks) { return held + n_blocks + 1; }
}  // namespace global_feature

struct ObsDims {
  int n_nodes = 0;
  int d_node = 0;
  int n_edges = 0;
  int d_edge = 0;
  int d_global = 0;
  int n_grippers = 0;

  bool operator==(const ObsDims&) const = default;
  int flat_size() const { return n_nodes * d_node + n_edges * d_edge + d_global; }
};

ObsDims obs_dims(int n_blocks, int n_grippers);

struct GraphObs {
  Eigen::MatrixXd nodes;  // N x (1 + n_grippers): z height, held-by flags
  Eigen::MatrixXd edges;  // N(N-1) x edge_feature::width
  std::vector<int> src;
  std::vector<int> dst;
  Eigen::VectorXd global;  // n_grippers x global_feature::width(N)
  int n_grippers = 0;

  int n_blocks() const { return static_cast<int>(nodes.rows()); }
  ObsDims dims() const;
};

/// Index of the directed edge src -> dst in the complete graph without self-loops.
inline int edge_index(int n_blocks, int src, int dst) { return src * (n_blocks - 1) + (dst < src ? dst : dst - 1); }

GraphObs build_obs(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg);

/// Global features without the per-block one-hot (the per-block part lives on the nodes).
Eigen::VectorXd invariant_global(const GraphObs& obs);

/// Flat export: dims header, then nodes, edge features, global (row-major), and the edge index.
struct FlatObs {
  ObsDims dims;
  std::vector<double> features;        // nodes | edges | global
  std::vector<std::int32_t> edge_index;  // (src, dst) pairs
};

FlatObs export_flat(const GraphObs& obs);
Eigen::VectorXd flat_features(const GraphObs& obs);

/// Relabels blocks: block b becomes perm[b].
GraphObs permute_obs(const GraphObs& obs, std::span<const int> perm);

}  // namespace magnaforge
