#pragma once

#include "magnaforge/simenv.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace magnaforge {

/// A JSONL episode log: one header record (blockset, goal, env config, reset seed and mode),
/// then one record per step with the action and the resulting reward.
struct TrajectoryLog {
  std::vector<std::string> lines;

  void save(const std::filesystem::path& path) const;
  /// Throws ParseError.
  static TrajectoryLog load(const std::filesystem::path& path);
};

struct RecordOptions {
  std::uint64_t seed = 0;
  const Blueprint* prebuilt = nullptr;  // null: scattered reset
  int max_steps = 0;                    // 0: until the episode ends
};

TrajectoryLog record_trajectory(std::shared_ptr<const BlockSet> bs, const EnvConfig& env, const Blueprint& goal,
                                const EnvPolicy& policy, const RecordOptions& options);

struct ReplayReport {
  bool identical = true;
  int steps = 0;
  std::optional<int> first_divergent_step;
  std::string detail;
  std::string to_json() const;
};

/// Re-simulates the logged actions and compares every reward bit for bit. Throws ParseError.
ReplayReport replay_trajectory(const TrajectoryLog& log);

/// Observations seen before each logged action.
std::vector<GraphObs> trajectory_observations(const TrajectoryLog& log);

}  // namespace magnaforge
