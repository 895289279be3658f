#pragma once

#include "magnaforge/nets.hpp"
#include "magnaforge/simenv.hpp"

#include <memory>
#include <numeric>
#include <random>

namespace magnaforge::testing {

/// The first `n` blocks of the default set.
inline std::shared_ptr<BlockSet> first_blocks(int n) {
  auto bs = std::make_shared<BlockSet>(default_blockset());
  bs->instance_type.resize(n);
  return bs;
}

/// A random, physically plausible world: a prebuilt blueprint jittered, random holds and velocities.
inline WorldState random_world(const BlockSet& bs, const Blueprint& bp, const EnvConfig& cfg, Rng& rng) {
  WorldState s = prebuilt_world(bp, bs, cfg, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> pick(-1, bs.size() - 1);
  for (auto& p : s.poses) {
    p.position += 0.03 * Vec3d(n(rng), n(rng), std::abs(n(rng)));
    p.orientation = normalized<double>(from_rotation_vector<double>(0.3 * Vec3d(n(rng), n(rng), n(rng))) * p.orientation);
  }
  for (int g = 0; g < cfg.n_grippers; ++g) {
    int c = pick(rng);
    if (c >= 0) s.gripper_holding[g] = c;
    s.gripper_linear_velocity[g] = Vec3d(n(rng), n(rng), n(rng));
    s.gripper_angular_velocity[g] = Vec3d(n(rng), n(rng), n(rng));
  }
  return s;
}

inline WorldState transformed(WorldState s, const Posed& g) {
  for (auto& p : s.poses) p = compose(g, p);
  return s;
}

/// Relabels every block: block b becomes perm[b] (world, holdings, connections and blueprint).
inline std::pair<WorldState, Blueprint> relabeled(const WorldState& s, const Blueprint& bp, const std::vector<int>& perm) {
  WorldState ps = s;
  for (std::size_t b = 0; b < perm.size(); ++b) ps.poses[perm[b]] = s.poses[b];
  for (auto& h : ps.gripper_holding)
    if (h) h = perm[*h];
  auto move = [&](const Connection& c) {
    return Connection::make({perm[c.a.block], c.a.magnet}, {perm[c.b.block], c.b.magnet});
  };
  for (auto& c : ps.connections) c = move(c);
  std::sort(ps.connections.begin(), ps.connections.end());
  Blueprint pbp = bp;
  pbp.connections.clear();
  for (const auto& c : bp.connections) pbp.connections.push_back(move(c));
  std::sort(pbp.connections.begin(), pbp.connections.end());
  pbp.relative_poses.clear();
  for (const auto& [k, p] : bp.relative_poses) {
    int a = perm[k.first], b = perm[k.second];
    pbp.relative_poses[{std::min(a, b), std::max(a, b)}] = a < b ? p : inverse(p);
  }
  pbp.blocks.clear();
  for (int b : bp.blocks) pbp.blocks.push_back(perm[b]);
  std::sort(pbp.blocks.begin(), pbp.blocks.end());
  return {ps, pbp};
}

/// Random permutation mapping each block onto a block of the same type.
inline std::vector<int> type_preserving_permutation(const BlockSet& bs, Rng& rng) {
  std::vector<int> perm(bs.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < static_cast<int>(bs.types.size()); ++t) {
    std::vector<int> same;
    for (int b = 0; b < bs.size(); ++b)
      if (bs.instance_type[b] == t) same.push_back(b);
    std::vector<int> shuffled = same;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t k = 0; k < same.size(); ++k) perm[same[k]] = shuffled[k];
  }
  return perm;
}

inline NetConfig micro_net(Architecture a, int n_blocks, int n_grippers = 2) {
  NetConfig c;
  c.architecture = a;
  c.n_blocks = n_blocks;
  c.n_grippers = n_grippers;
  c.d_model = 8;
  c.heads = 2;
  c.d_key = 4;
  c.ff = 8;
  c.layers = 2;
  c.critic_hidden = 8;
  c.resnet_hidden = 8;
  c.resnet_blocks = 2;
  return c;
}

/// Random observations of an n-block world with a blueprint over all of its blocks.
struct MicroScene {
  std::shared_ptr<BlockSet> bs;
  EnvConfig cfg;
  Blueprint bp;
  std::vector<GraphObs> obs;

  MicroScene(int n_blocks, int n_obs, std::uint64_t seed, int n_grippers = 2) : bs(first_blocks(n_blocks)) {
    cfg.n_grippers = n_grippers;
    std::vector<Attachment> chain;
    for (int b = 1; b < n_blocks; ++b) chain.push_back({{b - 1, 0}, {b, 1}, 0.0});
    bp = build_blueprint(*bs, "micro", 0, chain);
    Rng rng(seed);
    for (int i = 0; i < n_obs; ++i) obs.push_back(build_obs(random_world(*bs, bp, cfg, rng), bp, *bs, cfg));
  }
};

}  // namespace magnaforge::testing
