#pragma once

#include "magnaforge/blockset.hpp"
#include "magnaforge/kvconfig.hpp"
#include "magnaforge/obsgraph.hpp"

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace magnaforge {

using Rng = std::mt19937_64;

struct EnvConfig {
  int n_grippers = 2;
  int episode_len = 100;
  double dt = 0.1;
  double blueprint_reset_prob = 0.2;
  double v_max = 2.0;
  double w_max = 2.0 * M_PI;
  double d_snap = 0.03;
  double theta_snap = M_PI / 6.0;
  double detach_stretch = 0.05;
  double c_force = 0.1;
  double c_magnet_dense = 1.0;
  double c_pose_dense = 1.0;
  double magnet_shaping_scale = 0.2;  // m, length scale of the proximity shaping
  double pose_shaping_scale = 0.2;
  double eps_pos = 0.02;
  double eps_rot = 0.15;
  int gripper_transition_delay = 0;
  double arena_half_size = 1.0;
  double placement_clearance = 0.03;
  int placement_attempts = 2000;

  /// Throws ConfigError.
  void validate() const;
  KeyValues to_kv() const;
  static EnvConfig from_kv(const KeyValues& kv);
  static const std::set<std::string>& keys();
};

struct WorldState {
  std::vector<Posed> poses;
  std::vector<Connection> connections;  // sorted matching on magnet slots
  std::vector<std::optional<int>> gripper_holding;  // effective hold in the last step
  std::vector<std::optional<int>> gripper_target;   // block the gripper is committed to
  std::vector<int> gripper_disabled_until;
  std::vector<Vec3d> gripper_linear_velocity;   // executed, in the held block's frame
  std::vector<Vec3d> gripper_angular_velocity;
  double penetration = 0.0;  // summed push-out depth in the last step
  int step_count = 0;

  bool operator==(const WorldState&) const = default;
  bool connected(int a, int b) const;
};

/// Per-gripper block choice plus a per-block twist (vx vy vz wx wy wz) in the block's frame.
struct Action {
  std::vector<int> gripper_choice;
  Eigen::Matrix<double, Eigen::Dynamic, 6, Eigen::RowMajor> block_moves;
};

struct Potential {
  double value = 0.0;
  std::map<std::string, double> terms;
};

struct StepInfo {
  bool success = false;
  bool truncated = false;
  std::map<std::string, double> reward_terms;
  double potential = 0.0;
};

struct StepResult {
  GraphObs obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

struct ResetMode {
  const Blueprint* prebuilt = nullptr;  // null: scattered

  static ResetMode scattered() { return {}; }
  static ResetMode from_blueprint(const Blueprint& bp) { return {&bp}; }
};

struct GripperAssignment {
  std::vector<std::optional<int>> effective;
  std::vector<std::optional<int>> target;
  std::vector<int> disabled_until;
};

/// Transition-delay rule and same-block tie-break (lower gripper index wins).
GripperAssignment assign_grippers(const WorldState& state, std::span<const int> choice, const EnvConfig& cfg);

/// Removes connections stretched beyond detach_stretch and snaps eligible free pairs,
/// welding groups so snapped anchors coincide. `held` lists blocks held this step.
WorldState update_magnets(WorldState state, std::span<const double> stretch, std::span<const int> held,
                          const BlockSet& bs, const EnvConfig& cfg);

Potential compute_potential(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg);

bool check_success(const WorldState& state, const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg);

/// Connected components over live connections; group id per block.
std::vector<int> rigid_groups(int n_blocks, std::span<const Connection> connections);

WorldState empty_world(const BlockSet& bs, const EnvConfig& cfg);

/// All blocks resting flat on the ground with random yaw, non-overlapping.
WorldState scattered_world(const BlockSet& bs, const EnvConfig& cfg, Rng& rng);

/// `bp` realized at a random ground position/yaw, the rest scattered.
WorldState prebuilt_world(const Blueprint& bp, const BlockSet& bs, const EnvConfig& cfg, Rng& rng);

class AssemblyEnv {
 public:
  AssemblyEnv(std::shared_ptr<const BlockSet> blockset, EnvConfig config);

  StepResult reset(const Blueprint& target, ResetMode mode, Rng& rng);
  StepResult step(const Action& action);

  /// Keeps the world, swaps the goal (reset-free operation).
  StepResult retarget(const Blueprint& target);
  /// Replaces the world outright; the potential baseline follows the new state.
  void set_state(WorldState state);

  GraphObs observe() const;
  const WorldState& state() const { return state_; }
  const Blueprint& target() const { return target_; }
  const BlockSet& blockset() const { return *blockset_; }
  const EnvConfig& config() const { return config_; }
  bool done() const { return done_; }
  double potential() const { return potential_.value; }

 private:
  std::shared_ptr<const BlockSet> blockset_;
  EnvConfig config_;
  Blueprint target_;
  WorldState state_;
  Potential potential_;
  bool done_ = true;
};

/// A controller driving the env; receives the env itself so test doubles may act on state.
using EnvPolicy = std::function<Action(AssemblyEnv& env, const GraphObs& obs)>;

Action zero_action(const BlockSet& bs, const EnvConfig& cfg);

/// Builds `n_targets` consecutive goals on one persistent world; a goal ends on success
/// or after `per_target_cap` steps. Returns per-goal success.
std::vector<bool> reset_free_run(AssemblyEnv& env, const EnvPolicy& policy, std::span<const Blueprint> goals,
                                 int n_targets, int per_target_cap, Rng& rng);

/// Test double: teleports the target structure into place, then issues a zero action.
EnvPolicy teleport_oracle(std::uint64_t seed);

/// Uniform block choice, Gaussian moves.
EnvPolicy random_policy(std::uint64_t seed, double move_std = 0.5);

}  // namespace magnaforge
